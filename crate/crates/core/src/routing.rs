//! Expert-norm regression routers, dynamic-k / top-k gates and the
//! batch-max-normalized classifier-router baseline.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::clustering::ExpertSlices;
use crate::error::{Error, Result};
use crate::model::{add_bias_inplace, Activation};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterOutput {
    /// `|·|`, regression of expert output norms.
    Abs,
    /// Logistic output of the classifier baseline.
    Sigmoid,
}

/// `out(relu(z·Wh + bh)·Wo + bo)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `[d_m, d_h]`
    pub wh: Tensor,
    pub bh: Tensor,
    /// `[d_h, n]`
    pub wo: Tensor,
    pub bo: Tensor,
    pub output: RouterOutput,
}

/// Router hidden width: a sixth of the model width, at least 1.
pub fn default_router_hidden(d_model: usize) -> usize {
    (d_model / 6).max(1)
}

impl Router {
    pub fn init(
        d_model: usize,
        hidden: usize,
        n_experts: usize,
        output: RouterOutput,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, "router-init");
        Router {
            wh: rng::normal_tensor(&mut r, &[d_model, hidden], (2.0 / d_model as f64).sqrt()),
            bh: Tensor::zeros(&[hidden]),
            wo: rng::normal_tensor(&mut r, &[hidden, n_experts], (1.0 / hidden as f64).sqrt()),
            bo: Tensor::zeros(&[n_experts]),
            output,
        }
    }

    pub fn d_model(&self) -> usize {
        self.wh.rows()
    }

    pub fn hidden(&self) -> usize {
        self.wh.cols()
    }

    pub fn n_experts(&self) -> usize {
        self.wo.cols()
    }

    /// Pre-transform outputs, `[tokens, n]`.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.matmul(&self.wh)?;
        add_bias_inplace(&mut h, &self.bh);
        Activation::Relu.apply_slice(h.data_mut());
        let mut o = h.matmul(&self.wo)?;
        add_bias_inplace(&mut o, &self.bo);
        Ok(o)
    }

    /// Scores, `[tokens, n]`, all non-negative.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let o = self.logits(z)?;
        Ok(match self.output {
            RouterOutput::Abs => o.map(f32::abs),
            RouterOutput::Sigmoid => o.map(|v| 1.0 / (1.0 + (-v).exp())),
        })
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.wh, &self.bh, &self.wo, &self.bo]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wh, &mut self.bh, &mut self.wo, &mut self.bo]
    }

    /// Taped logits for training.
    fn tape_logits(&self, tape: &mut Tape<f32>, vars: &[Var; 4], z: Var) -> Result<Var> {
        let h = tape.linear(z, vars[0], vars[1])?;
        let h = tape.relu(h)?;
        tape.linear(h, vars[2], vars[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatePolicy {
    DynamicK { tau: f64 },
    TopK { k: usize },
}

impl GatePolicy {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        match *self {
            GatePolicy::DynamicK { tau } if !(0.0..=1.0).contains(&tau) => {
                Err(Error::Validation(vec![format!("tau {tau} outside [0, 1]")]))
            }
            GatePolicy::TopK { k } if k < 1 || k > n_experts => {
                Err(Error::Validation(vec![format!(
                    "k {k} outside [1, {n_experts}]"
                )]))
            }
            _ => Ok(()),
        }
    }

    pub fn decide(&self, scores: &[f32]) -> GateDecision {
        match *self {
            GatePolicy::DynamicK { tau } => dynamic_k_gate(scores, tau),
            GatePolicy::TopK { k } => top_k_gate(scores, k),
        }
    }

    /// τ or k, for CSV output.
    pub fn param(&self) -> f64 {
        match *self {
            GatePolicy::DynamicK { tau } => tau,
            GatePolicy::TopK { k } => k as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateDecision {
    pub mask: Vec<bool>,
    pub selected_count: usize,
    /// Set when every score was zero and all experts were selected.
    pub all_zero: bool,
}

/// Select expert `i` iff `scores[i] >= tau * max(scores)`.
pub fn dynamic_k_gate(scores: &[f32], tau: f64) -> GateDecision {
    let max = scores.iter().fold(0.0f32, |m, &s| m.max(s));
    let thr = tau * max as f64;
    let mask: Vec<bool> = scores.iter().map(|&s| s as f64 >= thr).collect();
    let selected_count = mask.iter().filter(|&&b| b).count();
    GateDecision {
        mask,
        selected_count,
        all_zero: max == 0.0,
    }
}

/// The `k` largest scores; ties go to the lower index.
pub fn top_k_gate(scores: &[f32], k: usize) -> GateDecision {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    GateDecision {
        mask,
        selected_count: k.min(scores.len()),
        all_zero: false,
    }
}

/// Router inputs `z` and per-expert output norms `‖E_i(z)‖₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDataset {
    /// `[tokens, d_m]`
    pub inputs: Tensor,
    /// `[tokens, n]`
    pub targets: Tensor,
}

impl RouterDataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.rows() != targets.rows() {
            return Err(Error::contract(format!(
                "router dataset shapes {:?} / {:?}",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(RouterDataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic 90/10 split by hashed token index.
    pub fn split(&self) -> Result<(RouterDataset, RouterDataset)> {
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if is_validation(i) {
                va.push(i)
            } else {
                tr.push(i)
            }
        }
        let take = |idx: &[usize]| -> Result<RouterDataset> {
            Ok(RouterDataset {
                inputs: self.inputs.select_rows(idx)?,
                targets: self.targets.select_rows(idx)?,
            })
        };
        Ok((take(&tr)?, take(&va)?))
    }
}

pub(crate) fn is_validation(token_index: usize) -> bool {
    rng::splitmix64(token_index as u64 ^ 0x5EED_0F_5A11) % 10 == 0
}

/// `‖E_i(z)‖₂` for every token and expert, `[tokens, n]`.
pub fn router_targets(slices: &ExpertSlices, act: Activation, z: &Tensor) -> Result<Tensor> {
    let n = slices.n_experts();
    let mut out = Tensor::zeros(&[z.rows(), n]);
    for (i, e) in slices.experts.iter().enumerate() {
        let y = e.forward(act, z)?;
        for r in 0..z.rows() {
            let s: f64 = y.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum();
            out.row_mut(r)[i] = s.sqrt() as f32;
        }
    }
    Ok(out)
}

/// Per-token, per-expert sum of hidden post-activations, `[tokens, n]`.
pub fn expert_activation_sums(
    slices: &ExpertSlices,
    act: Activation,
    z: &Tensor,
) -> Result<Tensor> {
    let n = slices.n_experts();
    let mut out = Tensor::zeros(&[z.rows(), n]);
    for (i, e) in slices.experts.iter().enumerate() {
        let src = e.wg.as_ref().unwrap_or(&e.w1);
        let mut h = z.matmul(src)?;
        if e.wg.is_none() {
            add_bias_inplace(&mut h, &e.b1);
        }
        act.apply_slice(h.data_mut());
        for r in 0..z.rows() {
            out.row_mut(r)[i] = h.row(r).iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineLabels {
    /// `[tokens, n]`, each in `[0, 1]`.
    pub labels: Tensor,
    /// The batch had no positive activation; labels are all zero.
    pub all_zero: bool,
}

/// `y_{k,j} = Σ_i a_{k,j,i} / max_{l,m} Σ_i a_{l,m,i}` from per-expert sums.
pub fn labels_from_sums(sums: &Tensor) -> BaselineLabels {
    let max = sums.data().iter().fold(0.0f32, |m, &v| m.max(v));
    if max <= 0.0 {
        return BaselineLabels {
            labels: Tensor::zeros(sums.shape()),
            all_zero: true,
        };
    }
    BaselineLabels {
        labels: sums.map(|v| (v / max).max(0.0)),
        all_zero: false,
    }
}

/// Labels from hidden activations laid out expert-major, `[tokens, n·s]`.
pub fn moefication_labels(acts: &Tensor, n_experts: usize) -> Result<BaselineLabels> {
    let (t, w) = acts
        .dims2()
        .ok_or_else(|| Error::dim("moefication_labels", format!("{:?}", acts.shape())))?;
    if n_experts == 0 || w % n_experts != 0 {
        return Err(Error::input(format!(
            "width {w} not divisible into {n_experts} experts"
        )));
    }
    let s = w / n_experts;
    let mut sums = Tensor::zeros(&[t, n_experts]);
    for r in 0..t {
        let row = acts.row(r);
        for j in 0..n_experts {
            sums.row_mut(r)[j] = row[j * s..(j + 1) * s]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32;
        }
    }
    Ok(labels_from_sums(&sums))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    /// Defaults to [`default_router_hidden`].
    #[serde(default)]
    pub hidden: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub opt: AdamConfig,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            hidden: None,
            steps: 1500,
            batch_size: 256,
            opt: AdamConfig::new(3e-3).cosine(1500),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean per-expert variance of the validation targets.
    pub target_variance: f64,
    pub steps: usize,
    /// Baseline only: mean top-k overlap with the true activation ranking.
    #[serde(default)]
    pub val_topk_agreement: Option<f64>,
}

pub(crate) fn column_variance(t: &Tensor) -> f64 {
    let (rows, cols) = (t.rows(), t.cols());
    if rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..cols {
        let mean = (0..rows).map(|r| t.at2(r, c) as f64).sum::<f64>() / rows as f64;
        total += (0..rows)
            .map(|r| (t.at2(r, c) as f64 - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
    }
    total / cols as f64
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel().max(1) as f64
}

enum Objective<'a> {
    /// MSE between `|logits|` and the targets.
    Regression,
    /// BCE against labels normalized by the minibatch maximum of `sums`.
    BatchMaxBce(&'a Tensor),
}

fn fit(
    router: &mut Router,
    inputs: &Tensor,
    targets: &Tensor,
    objective: Objective<'_>,
    cfg: &RouterTrainConfig,
    seed: u64,
) -> Result<f64> {
    let _ftz = crate::tensor::FlushSubnormals::new();
    let shapes: Vec<&[usize]> = router.params().iter().map(|t| t.shape()).collect();
    let mut opt = OptimizerState::<f32>::new(cfg.opt.clone(), &shapes, seed);
    let mut rng = rng::stream(seed, "router-batches");
    let n = inputs.rows();
    let bs = cfg.batch_size.min(n).max(1);
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
        let mut tape = Tape::new();
        let z = tape.constant(inputs.select_rows(&idx)?);
        let ps = router.params();
        let vars = [
            tape.param(ps[0].clone()),
            tape.param(ps[1].clone()),
            tape.param(ps[2].clone()),
            tape.param(ps[3].clone()),
        ];
        let logits = router.tape_logits(&mut tape, &vars, z)?;
        let loss = match objective {
            Objective::Regression => {
                let scores = tape.abs(logits)?;
                let y = tape.constant(targets.select_rows(&idx)?);
                tape.mse(scores, y)?
            }
            Objective::BatchMaxBce(sums) => {
                let labels = labels_from_sums(&sums.select_rows(&idx)?).labels;
                let y = tape.constant(labels);
                tape.bce_with_logits(logits, y)?
            }
        };
        last = tape.value(loss).item() as f64;
        if !last.is_finite() {
            return Err(Error::numeric("router training loss", Some(step)));
        }
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.take(v).expect("param grad"))
            .collect();
        let mut params = router.params_mut();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|p| &mut **p).collect();
        opt.step(&mut refs, &grads)?;
    }
    Ok(last)
}

/// Fit a regression router by MSE to expert output norms.
pub fn train_router(
    data: &RouterDataset,
    cfg: &RouterTrainConfig,
    seed: u64,
) -> Result<(Router, RouterReport)> {
    if data.is_empty() {
        return Err(Error::input("router dataset is empty"));
    }
    let (train, val) = data.split()?;
    let train = if train.is_empty() {
        data.clone()
    } else {
        train
    };
    let d = data.inputs.cols();
    let hidden = cfg.hidden.unwrap_or_else(|| default_router_hidden(d));
    let mut router = Router::init(d, hidden, data.targets.cols(), RouterOutput::Abs, seed);
    fit(
        &mut router,
        &train.inputs,
        &train.targets,
        Objective::Regression,
        cfg,
        seed,
    )?;
    let train_loss = mse(&router.forward(&train.inputs)?, &train.targets);
    let (val_loss, target_variance) = if val.is_empty() {
        (train_loss, column_variance(&train.targets))
    } else {
        (
            mse(&router.forward(&val.inputs)?, &val.targets),
            column_variance(&val.targets),
        )
    };
    let report = RouterReport {
        train_loss,
        val_loss,
        target_variance,
        steps: cfg.steps,
        val_topk_agreement: None,
    };
    Ok((router, report))
}

/// Inputs and per-expert activation sums for the classifier-router baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineDataset {
    pub inputs: Tensor,
    pub sums: Tensor,
}

/// Mean fraction of each token's true top-`k` experts (by activation sum)
/// found in the router's top-`k`.
pub fn topk_agreement(scores: &Tensor, truth: &Tensor, k: usize) -> f64 {
    let rows = scores.rows();
    if rows == 0 {
        return 0.0;
    }
    let mut hit = 0usize;
    for r in 0..rows {
        let a = top_k_gate(scores.row(r), k).mask;
        let b = top_k_gate(truth.row(r), k).mask;
        hit += a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    }
    hit as f64 / (rows * k) as f64
}

/// Train the sigmoid baseline router by BCE on batch-max-normalized labels.
pub fn train_baseline_router(
    data: &BaselineDataset,
    cfg: &RouterTrainConfig,
    seed: u64,
) -> Result<(Router, RouterReport)> {
    let n = data.inputs.rows();
    if n == 0 {
        return Err(Error::input("router dataset is empty"));
    }
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| !is_validation(i));
    let tr = if tr.is_empty() { (0..n).collect() } else { tr };
    let (tx, ts) = (data.inputs.select_rows(&tr)?, data.sums.select_rows(&tr)?);
    let d = data.inputs.cols();
    let n_exp = data.sums.cols();
    let hidden = cfg.hidden.unwrap_or_else(|| default_router_hidden(d));
    let mut router = Router::init(d, hidden, n_exp, RouterOutput::Sigmoid, seed);
    let train_loss = fit(
        &mut router,
        &tx,
        &ts,
        Objective::BatchMaxBce(&ts),
        cfg,
        seed,
    )?;
    let (vx, vs) = if va.is_empty() {
        (tx, ts)
    } else {
        (data.inputs.select_rows(&va)?, data.sums.select_rows(&va)?)
    };
    let pred = router.forward(&vx)?;
    let labels = labels_from_sums(&vs).labels;
    let k = (n_exp / 4).max(1);
    let report = RouterReport {
        train_loss,
        val_loss: bce(&pred, &labels),
        target_variance: column_variance(&labels),
        steps: cfg.steps,
        val_topk_agreement: Some(topk_agreement(&pred, &vs, k)),
    };
    Ok((router, report))
}

fn bce(p: &Tensor, y: &Tensor) -> f64 {
    let eps = 1e-7f64;
    p.data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(eps, 1.0 - eps);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / p.numel().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamic_k_examples() {
        assert_eq!(
            dynamic_k_gate(&[1.0, 0.5, 0.05, 0.2], 0.1).mask,
            vec![true, true, false, true]
        );
        assert_eq!(dynamic_k_gate(&[0.3, 0.1, 0.0], 0.0).selected_count, 3);
        assert_eq!(
            dynamic_k_gate(&[0.3, 0.1, 0.3], 1.0).mask,
            vec![true, false, true]
        );
        let z = dynamic_k_gate(&[0.0, 0.0], 0.5);
        assert!(z.all_zero && z.selected_count == 2);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            top_k_gate(&[3.0, 1.0, 2.0], 2).mask,
            vec![true, false, true]
        );
        assert_eq!(
            top_k_gate(&[1.0; 4], 2).mask,
            vec![true, true, false, false]
        );
        assert_eq!(top_k_gate(&[0.2, 0.1, 0.7], 3).selected_count, 3);
    }

    #[test]
    fn label_examples() {
        let one = Tensor::matrix(1, 2, vec![0.5, 0.0]).unwrap();
        assert_eq!(moefication_labels(&one, 1).unwrap().labels.item(), 1.0);
        let two = Tensor::matrix(2, 1, vec![1.0, 10.0]).unwrap();
        assert_eq!(labels_from_sums(&two).labels.data(), &[0.1, 1.0]);
        assert!(labels_from_sums(&Tensor::zeros(&[3, 2])).all_zero);
    }

    #[test]
    fn policy_validation() {
        assert!(GatePolicy::DynamicK { tau: 1.5 }.validate(4).is_err());
        assert!(GatePolicy::TopK { k: 0 }.validate(4).is_err());
        assert!(GatePolicy::TopK { k: 4 }.validate(4).is_ok());
    }

    fn cfg(steps: usize, hidden: usize, lr: f64) -> RouterTrainConfig {
        RouterTrainConfig {
            hidden: Some(hidden),
            steps,
            batch_size: 256,
            opt: AdamConfig::new(lr).cosine(steps),
        }
    }

    #[test]
    fn zero_targets_train_to_zero() {
        let x = rng::normal_tensor(&mut rng::stream(1, "t"), &[512, 8], 1.0);
        let data = RouterDataset::new(x.clone(), Tensor::zeros(&[512, 4])).unwrap();
        // The abs output makes gradients sign-valued; convergence is lr-limited.
        let (router, rep) = train_router(&data, &cfg(1500, 4, 1e-2), 1).unwrap();
        assert!(rep.val_loss < 1e-6, "{}", rep.val_loss);
        assert!(router.forward(&x).unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn planted_router_is_recovered() {
        // Output offset keeps teacher logits away from the abs fold; the
        // student is wider than the teacher to avoid spurious minima.
        let x = rng::normal_tensor(&mut rng::stream(2, "t"), &[8192, 32], 1.0);
        let mut teacher = Router::init(32, 5, 4, RouterOutput::Abs, 3);
        teacher.bo.data_mut().iter_mut().for_each(|b| *b += 4.0);
        let data = RouterDataset::new(x.clone(), teacher.forward(&x).unwrap()).unwrap();
        let (_, rep) = train_router(&data, &cfg(8000, 16, 3e-3), 4).unwrap();
        assert!(rep.val_loss < 1e-3 * rep.target_variance, "{rep:?}");
        assert_eq!(train_router(&data, &cfg(8000, 16, 3e-3), 4).unwrap().1, rep);
    }
}
