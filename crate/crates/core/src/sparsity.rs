//! Square-Hoyer activation-sparsity penalty, the displaced pre-activation
//! used with GELU, and per-layer non-zero statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{forward, Activation, ActivationTrace, Capture, DenseModel, Site, TokenBatch};
use crate::tensor::{Real, Tensor};

/// Rows whose entries are all below this magnitude count as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub alpha: f64,
    /// Linear ramp of α from 0 to `alpha` over the run.
    #[serde(default)]
    pub ramp: bool,
    /// Displacement `d` for GELU models.
    #[serde(default = "default_displacement")]
    pub displacement: f64,
    /// Defaults to 0 for ReLU, 1e-6 for GELU.
    #[serde(default)]
    pub nonzero_threshold: Option<f64>,
}

fn default_displacement() -> f64 {
    -10.0
}

impl SparsityConfig {
    pub fn new(alpha: f64) -> Self {
        SparsityConfig {
            alpha,
            ramp: false,
            displacement: default_displacement(),
            nonzero_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.alpha >= 0.0) {
            v.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if let Some(t) = self.nonzero_threshold {
            if !(t >= 0.0) {
                v.push(format!("nonzero_threshold must be >= 0, got {t}"));
            }
        }
        if !self.displacement.is_finite() {
            v.push("displacement must be finite".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// α at `step` of `total` (the ramp reaches `alpha` at the last step).
    pub fn alpha_at(&self, step: usize, total: usize) -> f64 {
        if !self.ramp || total <= 1 {
            return self.alpha;
        }
        self.alpha * (step.min(total - 1) as f64 / (total - 1) as f64)
    }
}

pub fn default_threshold(act: Activation) -> f64 {
    match act {
        Activation::Relu => 0.0,
        Activation::Gelu => 1e-6,
    }
}

/// `max(0, z − d)` elementwise.
pub fn displaced_preactivation<T: Real>(z: &Tensor<T>, d: f64) -> Tensor<T> {
    let d = T::lit(d);
    z.map(|v| {
        let s = v - d;
        if s > T::zero() {
            s
        } else {
            T::zero()
        }
    })
}

/// Taped `max(0, z − d)`.
pub fn displaced_tape<T: Real>(tape: &mut Tape<T>, z: Var, d: f64) -> Result<Var> {
    let shift = tape.constant(Tensor::full(tape.value(z).shape(), T::lit(-d)));
    let s = tape.add(z, shift)?;
    tape.relu(s)
}

/// Mean over tokens of `(Σ|a|)² / Σa²` for one `[tokens, m]` activation matrix.
/// Degenerate rows contribute 0 and are counted.
pub fn hoyer_layer<T: Real>(a: &Tensor<T>) -> (f64, usize) {
    let (rows, _) = a.dims2().expect("activation matrix");
    let mut total = 0.0;
    let mut degenerate = 0;
    for r in 0..rows {
        let row = a.row(r);
        if row
            .iter()
            .all(|v| v.abs().to_f64().unwrap() < DEGENERATE_EPS)
        {
            degenerate += 1;
            continue;
        }
        let s1: f64 = row.iter().map(|v| v.abs().to_f64().unwrap()).sum();
        let s2: f64 = row.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
        total += s1 * s1 / s2;
    }
    (total / rows.max(1) as f64, degenerate)
}

/// `(1/L) Σ_l mean_tokens (Σ|a|)²/Σa²` over the given layers.
pub fn hoyer_value<T: Real>(layers: &[Tensor<T>]) -> Result<(f64, usize)> {
    if layers.is_empty() || layers.iter().any(|a| a.rank() != 2 || a.rows() == 0) {
        return Err(Error::input(
            "hoyer needs at least one layer with one token",
        ));
    }
    let mut sum = 0.0;
    let mut deg = 0;
    for a in layers {
        let (v, d) = hoyer_layer(a);
        sum += v;
        deg += d;
    }
    Ok((sum / layers.len() as f64, deg))
}

/// Hoyer penalty over the FFN hidden activations recorded in `trace`.
pub fn hoyer_loss(
    trace: &ActivationTrace,
    act: Activation,
    displacement: f64,
) -> Result<(f64, usize)> {
    let mut layers = Vec::new();
    for (site, st) in &trace.sites {
        if site.kind != crate::model::SiteKind::Ffn {
            continue;
        }
        let t = match act {
            Activation::Relu => st.post.clone(),
            Activation::Gelu => st
                .pre
                .as_ref()
                .map(|p| displaced_preactivation(p, displacement)),
        };
        layers.push(
            t.ok_or_else(|| Error::contract(format!("trace lacks hidden activations at {site}")))?,
        );
    }
    hoyer_value(&layers)
}

/// Differentiable Hoyer penalty. Degenerate rows are masked with constants so
/// no NaN can enter the tape; returns the loss and the degenerate-row count.
pub fn hoyer_tape<T: Real>(tape: &mut Tape<T>, layers: &[Var]) -> Result<(Var, usize)> {
    if layers.is_empty() {
        return Err(Error::input("hoyer needs at least one layer"));
    }
    let mut total: Option<Var> = None;
    let mut degenerate = 0;
    for &a in layers {
        let v = tape.value(a);
        let (rows, _) = v
            .dims2()
            .ok_or_else(|| Error::dim("hoyer", format!("{:?}", v.shape())))?;
        if rows == 0 {
            return Err(Error::input("hoyer needs at least one token"));
        }
        let mask: Vec<T> = (0..rows)
            .map(|r| {
                let deg = v
                    .row(r)
                    .iter()
                    .all(|x| x.abs().to_f64().unwrap() < DEGENERATE_EPS);
                if deg {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        degenerate += mask.iter().filter(|m| **m == T::one()).count();
        let keep = tape.constant(Tensor::from_vec(
            mask.iter().map(|&m| T::one() - m).collect(),
        ));
        let mask = tape.constant(Tensor::from_vec(mask));
        let abs = tape.abs(a)?;
        let s1 = tape.sum(abs, Reduce::Rows)?;
        let num = tape.square(s1)?;
        let sq = tape.square(a)?;
        let den = tape.sum(sq, Reduce::Rows)?;
        let den = tape.add(den, mask)?;
        let ratio = tape.div(num, den)?;
        let ratio = tape.mul(ratio, keep)?;
        let s = tape.sum(ratio, Reduce::All)?;
        let mean = tape.scale(s, 1.0 / rows as f64)?;
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty"), 1.0 / layers.len() as f64)?;
    Ok((loss, degenerate))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// `histogram[c]` = tokens with exactly `c` non-zero activations.
    pub histogram: Vec<u64>,
    pub mean: f64,
    pub variance: f64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub threshold: f64,
    pub layers: Vec<LayerStats>,
}

impl ActivationStats {
    pub fn mean_nonzero(&self) -> f64 {
        self.layers.iter().map(|l| l.mean).sum::<f64>() / self.layers.len().max(1) as f64
    }
}

fn finish(layer: usize, histogram: Vec<u64>) -> LayerStats {
    let tokens: u64 = histogram.iter().sum();
    let n = tokens.max(1) as f64;
    let mean = histogram
        .iter()
        .enumerate()
        .map(|(c, &k)| c as f64 * k as f64)
        .sum::<f64>()
        / n;
    let variance = histogram
        .iter()
        .enumerate()
        .map(|(c, &k)| (c as f64 - mean).powi(2) * k as f64)
        .sum::<f64>()
        / n;
    LayerStats {
        layer,
        histogram,
        mean,
        variance,
        tokens,
    }
}

/// Counts of `|post-activation| > threshold` per token, per FFN layer.
/// Gated FFNs are measured on the gate path.
pub fn activation_stats(
    model: &DenseModel,
    batches: &[TokenBatch],
    threshold: f64,
) -> Result<ActivationStats> {
    if batches.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let layers: Vec<usize> = (0..model.num_layers())
        .filter(|&l| model.ffn(l).is_some())
        .collect();
    let mut hists: Vec<Vec<u64>> = layers
        .iter()
        .map(|&l| vec![0; model.ffn(l).unwrap().hidden() + 1])
        .collect();
    let cap = Capture {
        sites: Some(layers.iter().map(|&l| Site::ffn(l)).collect()),
        hidden: true,
        ..Capture::default()
    };
    for b in batches {
        let (_, tr, _) = forward(model, b, &cap)?;
        for (h, &l) in hists.iter_mut().zip(&layers) {
            let post = tr.ffn_post(l).expect("captured");
            for r in 0..post.rows() {
                let c = post
                    .row(r)
                    .iter()
                    .filter(|v| (v.abs() as f64) > threshold)
                    .count();
                h[c] += 1;
            }
        }
    }
    Ok(ActivationStats {
        threshold,
        layers: layers
            .iter()
            .zip(hists)
            .map(|(&l, h)| finish(l, h))
            .collect(),
    })
}

/// Write `<prefix>_hist.csv` (layer, bucket_lo, bucket_hi, count) and
/// `<prefix>_summary.csv` (layer, mean, variance, tokens).
pub fn write_stats_csv(
    dir: &Path,
    prefix: &str,
    stats: &ActivationStats,
    bucket_width: usize,
) -> Result<()> {
    let w = bucket_width.max(1);
    let hist_path = dir.join(format!("{prefix}_hist.csv"));
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| Error::io(p.clone(), e.into())
    };
    let mut h = csv::Writer::from_path(&hist_path).map_err(io(&hist_path))?;
    h.write_record(["layer", "bucket_lo", "bucket_hi", "count"])
        .map_err(io(&hist_path))?;
    for l in &stats.layers {
        for (b, chunk) in l.histogram.chunks(w).enumerate() {
            let lo = b * w;
            let hi = lo + chunk.len() - 1;
            let count: u64 = chunk.iter().sum();
            h.write_record([
                l.layer.to_string(),
                lo.to_string(),
                hi.to_string(),
                count.to_string(),
            ])
            .map_err(io(&hist_path))?;
        }
    }
    h.flush().map_err(|e| Error::io(&hist_path, e))?;
    let sum_path = dir.join(format!("{prefix}_summary.csv"));
    let mut s = csv::Writer::from_path(&sum_path).map_err(io(&sum_path))?;
    s.write_record(["layer", "mean", "variance", "tokens"])
        .map_err(io(&sum_path))?;
    for l in &stats.layers {
        s.write_record([
            l.layer.to_string(),
            l.mean.to_string(),
            l.variance.to_string(),
            l.tokens.to_string(),
        ])
        .map_err(io(&sum_path))?;
    }
    s.flush().map_err(|e| Error::io(&sum_path, e))
}
