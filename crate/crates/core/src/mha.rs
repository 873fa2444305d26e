//! Replaces attention projections with cost-matched two-layer ReLU MLPs
//! distilled from the original linear maps.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{
    forward, Activation, Capture, DenseModel, FfnWeights, Linear, ProjSlot, Site, SiteKind,
    TokenBatch,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng;
use crate::routing::{column_variance, is_validation};
use crate::tensor::Tensor;

/// `W_outᵀ relu(W_inᵀ x + b_in) + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacementMlp {
    /// `[d_m, h]`
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// `[h, d_m]`
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub provenance: Site,
}

/// Cost-matched hidden width: `2·d_m·h = d_m²`.
pub fn matched_hidden(d_model: usize) -> usize {
    (d_model / 2).max(1)
}

impl ReplacementMlp {
    pub fn init(d_model: usize, hidden: usize, provenance: Site, seed: u64) -> Self {
        let mut r = rng::stream(seed, "mha-init");
        ReplacementMlp {
            w_in: rng::normal_tensor(&mut r, &[d_model, hidden], (2.0 / d_model as f64).sqrt()),
            b_in: Tensor::zeros(&[hidden]),
            // Zero output layer: starts as the zero map, gradients still reach W_in once W_out moves.
            w_out: Tensor::zeros(&[hidden, d_model]),
            b_out: Tensor::zeros(&[d_model]),
            provenance,
        }
    }

    /// Width-`2·d_m` MLP reproducing `x·W + b` exactly: `relu(u) − relu(−u) = u`.
    pub fn planted_exact(lin: &Linear, provenance: Site) -> Self {
        let (d, o) = (lin.weight.rows(), lin.weight.cols());
        let mut w_in = Tensor::zeros(&[d, 2 * o]);
        for r in 0..d {
            let src = lin.weight.row(r);
            let dst = w_in.row_mut(r);
            dst[..o].copy_from_slice(src);
            dst[o..].iter_mut().zip(src).for_each(|(x, &v)| *x = -v);
        }
        let b_in = Tensor::from_vec(
            lin.bias
                .data()
                .iter()
                .copied()
                .chain(lin.bias.data().iter().map(|&v| -v))
                .collect(),
        );
        let mut w_out = Tensor::zeros(&[2 * o, o]);
        for j in 0..o {
            w_out.row_mut(j)[j] = 1.0;
            w_out.row_mut(o + j)[j] = -1.0;
        }
        ReplacementMlp {
            w_in,
            b_in,
            w_out,
            b_out: Tensor::zeros(&[o]),
            provenance,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w_in.numel() + self.b_in.numel() + self.w_out.numel() + self.b_out.numel()
    }

    /// The same map viewed as a standard FFN, for clustering and MoE conversion.
    pub fn as_ffn(&self) -> FfnWeights {
        FfnWeights {
            w1: self.w_in.clone(),
            b1: self.b_in.clone(),
            w2: self.w_out.clone(),
            b2: self.b_out.clone(),
            wg: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.as_ffn().forward(Activation::Relu, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Defaults to [`matched_hidden`].
    #[serde(default)]
    pub hidden: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub opt: AdamConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            hidden: None,
            steps: 2000,
            batch_size: 256,
            opt: AdamConfig::new(3e-3).cosine(2000),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub site: Site,
    pub val_mse: f64,
    /// Mean per-coordinate variance of the held-out targets.
    pub target_variance: f64,
}

/// Fit a ReLU MLP to `x ↦ x·W + b` on captured inputs by MSE.
pub fn distill_projection(
    original: &Linear,
    cfg: &DistillConfig,
    samples: &Tensor,
    seed: u64,
    site: Site,
) -> Result<(ReplacementMlp, DistillReport)> {
    let n = samples.rows();
    if n == 0 {
        return Err(Error::input("no samples for distillation"));
    }
    let _ftz = crate::tensor::FlushSubnormals::new();
    let targets = original.apply(samples)?;
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| !is_validation(i));
    let tr = if tr.is_empty() { (0..n).collect() } else { tr };
    let va = if va.is_empty() { tr.clone() } else { va };
    let (tx, ty) = (samples.select_rows(&tr)?, targets.select_rows(&tr)?);
    let d = samples.cols();
    let hidden = cfg.hidden.unwrap_or_else(|| matched_hidden(d));
    let mut mlp = ReplacementMlp::init(d, hidden, site, seed);
    let shapes: Vec<&[usize]> = vec![
        mlp.w_in.shape(),
        mlp.b_in.shape(),
        mlp.w_out.shape(),
        mlp.b_out.shape(),
    ];
    let mut opt = OptimizerState::<f32>::new(cfg.opt.clone(), &shapes, seed);
    let mut r = rng::stream(seed, "distill-batches");
    let bs = cfg.batch_size.min(tx.rows()).max(1);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..bs).map(|_| r.random_range(0..tx.rows())).collect();
        let mut tape = Tape::new();
        let x = tape.constant(tx.select_rows(&idx)?);
        let y = tape.constant(ty.select_rows(&idx)?);
        let vars = [
            tape.param(mlp.w_in.clone()),
            tape.param(mlp.b_in.clone()),
            tape.param(mlp.w_out.clone()),
            tape.param(mlp.b_out.clone()),
        ];
        let h = tape.linear(x, vars[0], vars[1])?;
        let h = tape.relu(h)?;
        let out = tape.linear(h, vars[2], vars[3])?;
        let loss = tape.mse(out, y)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::numeric(
                format!("distillation of {site}"),
                Some(step),
            ));
        }
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.take(v).expect("param grad"))
            .collect();
        let mut params = [&mut mlp.w_in, &mut mlp.b_in, &mut mlp.w_out, &mut mlp.b_out];
        opt.step(&mut params, &grads)?;
    }
    let (vx, vy) = (samples.select_rows(&va)?, targets.select_rows(&va)?);
    let pred = mlp.forward(&vx)?;
    let val_mse = pred
        .data()
        .iter()
        .zip(vy.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / vy.numel() as f64;
    Ok((
        mlp,
        DistillReport {
            site,
            val_mse,
            target_variance: column_variance(&vy),
        },
    ))
}

/// Capture inputs of `sites` on `batches`, `[tokens, d_m]` per site.
pub fn capture_site_inputs(
    model: &DenseModel,
    sites: &[Site],
    batches: &[TokenBatch],
) -> Result<Vec<Tensor>> {
    let d = model.config.model_dim;
    let mut bufs: Vec<Vec<f32>> = vec![Vec::new(); sites.len()];
    let cap = Capture::io_at(sites.iter().copied());
    for b in batches {
        let (_, tr, _) = forward(model, b, &cap)?;
        for (buf, s) in bufs.iter_mut().zip(sites) {
            buf.extend_from_slice(tr.input(*s).expect("captured site").data());
        }
    }
    bufs.into_iter()
        .map(|v| Tensor::new(vec![v.len() / d, d], v))
        .collect()
}

/// Replace the listed attention projections with distilled MLPs. Every site
/// is trained independently against the original model's activations.
pub fn replace_mha(
    model: &DenseModel,
    sites: &[Site],
    batches: &[TokenBatch],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(DenseModel, Vec<DistillReport>)> {
    let unique: BTreeSet<Site> = sites.iter().copied().collect();
    let sites: Vec<Site> = unique.into_iter().collect();
    for s in &sites {
        if s.kind == SiteKind::Ffn {
            return Err(Error::contract(format!(
                "{s} is not an attention projection"
            )));
        }
        match model.blocks.get(s.layer).map(|b| b.proj(s.kind)) {
            Some(ProjSlot::Dense(_)) => {}
            Some(_) => {
                return Err(Error::contract(format!(
                    "{s} is already replaced or converted"
                )))
            }
            None => return Err(Error::contract(format!("{s} beyond layer count"))),
        }
    }
    if sites.is_empty() {
        return Ok((model.clone(), Vec::new()));
    }
    let inputs = capture_site_inputs(model, &sites, batches)?;
    let mut out = model.clone();
    let mut reports = Vec::new();
    for (s, x) in sites.iter().zip(&inputs) {
        let ProjSlot::Dense(lin) = model.blocks[s.layer].proj(s.kind) else {
            unreachable!()
        };
        let site_seed =
            rng::splitmix64(seed ^ rng::splitmix64((s.layer as u64) << 8 | s.kind as u64));
        let (mlp, rep) = distill_projection(lin, cfg, x, site_seed, *s)?;
        log::info!(
            "replaced {s}: held-out mse {:.3e} (target var {:.3e})",
            rep.val_mse,
            rep.target_variance
        );
        *out.blocks[s.layer].proj_mut(s.kind) = ProjSlot::Replaced(mlp);
        reports.push(rep);
    }
    Ok((out, reports))
}

/// Swap every listed projection for its exact planted MLP.
pub fn plant_exact(model: &DenseModel, sites: &[Site]) -> Result<DenseModel> {
    let mut out = model.clone();
    for s in sites {
        let slot = out.blocks[s.layer].proj_mut(s.kind);
        let ProjSlot::Dense(lin) = slot else {
            return Err(Error::contract(format!("{s} is not a dense projection")));
        };
        *slot = ProjSlot::Replaced(ReplacementMlp::planted_exact(lin, *s));
    }
    Ok(out)
}

/// Every attention projection site of the model.
pub fn all_projection_sites(model: &DenseModel) -> Vec<Site> {
    (0..model.num_layers())
        .flat_map(|l| SiteKind::PROJECTIONS.map(|k| Site::proj(l, k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_mlp_is_exact() {
        let mut r = rng::stream(2, "t");
        let lin = Linear {
            weight: rng::normal_tensor(&mut r, &[8, 8], 1.0),
            bias: rng::normal_tensor(&mut r, &[8], 1.0),
        };
        let x = rng::normal_tensor(&mut r, &[32, 8], 1.0);
        let mlp = ReplacementMlp::planted_exact(&lin, Site::proj(0, SiteKind::Q));
        assert_eq!(mlp.forward(&x).unwrap(), lin.apply(&x).unwrap());
    }

    #[test]
    fn matched_width_params_within_five_percent() {
        for d in [16, 64, 128] {
            let m = ReplacementMlp::init(d, matched_hidden(d), Site::proj(0, SiteKind::Q), 0);
            let dense = (d * d + d) as f64;
            assert!(
                ((m.num_params() as f64 - dense) / dense).abs() < 0.05,
                "d={d}"
            );
        }
    }

    #[test]
    fn zero_map_distills_to_near_zero() {
        let lin = Linear {
            weight: Tensor::zeros(&[8, 8]),
            bias: Tensor::zeros(&[8]),
        };
        let mut r = rng::stream(4, "t");
        let x = rng::normal_tensor(&mut r, &[512, 8], 1.0);
        let cfg = DistillConfig {
            steps: 300,
            batch_size: 64,
            ..DistillConfig::default()
        };
        let (_, rep) = distill_projection(&lin, &cfg, &x, 0, Site::proj(0, SiteKind::V)).unwrap();
        assert!(rep.val_mse < 1e-8, "mse {}", rep.val_mse);
    }
}
