//! Analytic FLOPs (1 FLOP = 1 multiply-accumulate) and realized per-token
//! cost measured from execution traces.
//!
//! Biases, activations, norms and softmax are excluded. Attention score and
//! value products cost `2·seq·d_m` per token per layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenseModel, FfnKind, FfnSlot, ProjSlot, Site, SiteKind, TransformerConfig};
use crate::moe::{ExecutionTrace, MoeLayer};
use crate::routing::GatePolicy;

/// Shape of one FFN-like site for cost purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub d_m: u64,
    /// Expansion factor: hidden width is `e·d_m`.
    pub e: u64,
    pub n: u64,
    /// Router hidden width.
    pub d_h: u64,
    /// Gated FFNs carry a third `d_m × e·d_m` matrix.
    #[serde(default)]
    pub gated: bool,
}

impl CostParams {
    pub fn new(d_m: u64, e: u64, n: u64, d_h: u64) -> Result<Self> {
        let p = CostParams {
            d_m,
            e,
            n,
            d_h,
            gated: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        for (name, x) in [
            ("d_m", self.d_m),
            ("e", self.e),
            ("n", self.n),
            ("d_h", self.d_h),
        ] {
            if x == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.n > 0 && (self.e * self.d_m) % self.n != 0 {
            v.push(format!(
                "n = {} does not divide e·d_m = {}",
                self.n,
                self.e * self.d_m
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn mats(&self) -> u64 {
        if self.gated {
            3
        } else {
            2
        }
    }

    /// Cost of one expert pass.
    pub fn expert_flops(&self) -> u64 {
        self.mats() * self.e * self.d_m * self.d_m / self.n
    }

    /// Routing cost `d_m·d_h + d_h·n`.
    pub fn router_flops(&self) -> u64 {
        self.d_h * (self.d_m + self.n)
    }
}

/// Dense FFN cost `2e·d_m²` (`3e·d_m²` gated).
pub fn ffn_flops(p: &CostParams) -> u64 {
    p.mats() * p.e * p.d_m * p.d_m
}

/// Cost of running `k` experts plus the router; `k` may be a fractional mean.
pub fn dynk_flops(p: &CostParams, k: f64) -> f64 {
    k * p.expert_flops() as f64 + p.router_flops() as f64
}

/// Integer form of [`dynk_flops`] for a whole number of experts.
pub fn dynk_flops_int(p: &CostParams, k: u64) -> u64 {
    k * p.expert_flops() + p.router_flops()
}

/// `k/n + d_h·(1 + n/d_m)/(2e·d_m)`, the ratio to the dense FFN.
pub fn flops_ratio(p: &CostParams, k: f64) -> f64 {
    let (d_m, e, n, d_h) = (p.d_m as f64, p.e as f64, p.n as f64, p.d_h as f64);
    let mats = p.mats() as f64;
    k / n + d_h * (1.0 + n / d_m) / (mats * e * d_m)
}

/// Expert count at which the MoE layer costs exactly as much as the dense
/// FFN; fewer experts save compute. Negative when routing alone exceeds it.
pub fn break_even_k(p: &CostParams) -> f64 {
    p.n as f64 * (1.0 - flops_ratio(p, 0.0))
}

/// Row of the ratio grid over expert counts and executed fractions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeRow {
    pub n: u64,
    pub k_frac: f64,
    pub ratio: f64,
}

/// Ratio grid for a fixed `d_m, e, d_h` across expert counts.
pub fn regime_grid(
    d_m: u64,
    e: u64,
    d_h: u64,
    ns: &[u64],
    k_fracs: &[f64],
) -> Result<Vec<RegimeRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        let p = CostParams::new(d_m, e, n, d_h)?;
        for &f in k_fracs {
            rows.push(RegimeRow {
                n,
                k_frac: f,
                ratio: flops_ratio(&p, f * n as f64),
            });
        }
    }
    Ok(rows)
}

/// Cost description of a single site in a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SiteCost {
    Fixed(u64),
    Moe { expert: u64, router: u64, n: u64 },
}

fn moe_cost(layer: &MoeLayer) -> SiteCost {
    let d = layer.slices.d_model() as u64;
    let mats = if layer.slices.is_gated() { 3 } else { 2 };
    let expert = mats * d * layer.expert_size() as u64;
    let n = layer.n_experts() as u64;
    let router = layer
        .router
        .as_ref()
        .map_or(0, |r| (r.hidden() as u64) * (d + n));
    SiteCost::Moe { expert, router, n }
}

fn site_costs(model: &DenseModel) -> BTreeMap<Site, SiteCost> {
    let d = model.config.model_dim as u64;
    let mut out = BTreeMap::new();
    for (l, b) in model.blocks.iter().enumerate() {
        for kind in SiteKind::PROJECTIONS {
            let c = match b.proj(kind) {
                ProjSlot::Dense(_) => SiteCost::Fixed(d * d),
                ProjSlot::Replaced(m) => SiteCost::Fixed(2 * d * m.hidden() as u64),
                ProjSlot::Moe(m) => moe_cost(m),
            };
            out.insert(Site::proj(l, kind), c);
        }
        let c = match &b.ffn {
            FfnSlot::Dense(f) => {
                SiteCost::Fixed((if f.is_gated() { 3 } else { 2 }) * d * f.hidden() as u64)
            }
            FfnSlot::Moe(m) => moe_cost(m),
        };
        out.insert(Site::ffn(l), c);
    }
    out
}

/// Attention products per token per layer.
pub fn attention_flops(d_m: u64, seq: u64) -> u64 {
    2 * seq * d_m
}

/// Closed-form per-token cost of the dense model described by `c`.
pub fn dense_model_flops(c: &TransformerConfig, seq: u64) -> u64 {
    let d = c.model_dim as u64;
    let mats = if c.ffn_kind == FfnKind::Gated { 3 } else { 2 };
    let per_layer = 4 * d * d + attention_flops(d, seq) + mats * c.expansion_factor as u64 * d * d;
    c.num_layers as u64 * per_layer + d * c.output_dim() as u64
}

/// Realized cost of a model on a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCost {
    pub tokens: u64,
    /// Exact sum of per-token costs.
    pub total: u128,
    /// Mean per-token cost per site (MoE sites include their router).
    pub sites: BTreeMap<Site, f64>,
    /// Non-site terms per token: attention products plus the output head.
    pub fixed_other: u64,
    /// Mean executed experts over MoE sites, as a fraction of `n`.
    pub mean_executed_frac: Option<f64>,
    /// Realized cost of the MoE sites (routers included) over the cost of
    /// the dense modules they replaced.
    pub moe_site_frac: Option<f64>,
}

impl ModelCost {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            return 0.0;
        }
        self.total as f64 / self.tokens as f64
    }
}

fn check_trace(model: &DenseModel, trace: &ExecutionTrace) -> Result<u64> {
    let mut moe: Vec<Site> = model.moe_sites();
    moe.sort();
    let traced: Vec<Site> = trace.counts.keys().copied().collect();
    if moe != traced {
        return Err(Error::contract(format!(
            "trace covers {traced:?} but the model's MoE sites are {moe:?}"
        )));
    }
    let mut tokens = None;
    for (s, c) in &trace.counts {
        match tokens {
            None => tokens = Some(c.len()),
            Some(t) if t != c.len() => {
                return Err(Error::contract(format!(
                    "site {s} traced {} tokens, expected {t}",
                    c.len()
                )));
            }
            _ => {}
        }
    }
    Ok(tokens.unwrap_or(0) as u64)
}

/// Measured per-token cost from realized expert counts. A fully dense model
/// accepts an empty trace with `tokens` given explicitly.
pub fn model_flops(
    model: &DenseModel,
    trace: &ExecutionTrace,
    seq: usize,
    dense_tokens: u64,
) -> Result<ModelCost> {
    let mut tokens = check_trace(model, trace)?;
    if trace.counts.is_empty() {
        tokens = dense_tokens;
    }
    let d = model.config.model_dim as u64;
    let fixed_other = model.num_layers() as u64 * attention_flops(d, seq as u64)
        + d * model.config.output_dim() as u64;
    let mut total = fixed_other as u128 * tokens as u128;
    let mut sites = BTreeMap::new();
    let (mut exec_sum, mut exec_den) = (0u128, 0u128);
    let (mut moe_total, mut moe_dense) = (0u128, 0u128);
    for (site, c) in site_costs(model) {
        let site_total: u128 = match c {
            SiteCost::Fixed(f) => f as u128 * tokens as u128,
            SiteCost::Moe { expert, router, n } => {
                let counts = &trace.counts[&site];
                let executed: u128 = counts.iter().map(|&k| k as u128).sum();
                exec_sum += executed;
                exec_den += n as u128 * counts.len() as u128;
                let t = executed * expert as u128 + router as u128 * tokens as u128;
                moe_total += t;
                moe_dense += (n * expert) as u128 * tokens as u128;
                t
            }
        };
        total += site_total;
        sites.insert(
            site,
            if tokens == 0 {
                0.0
            } else {
                site_total as f64 / tokens as f64
            },
        );
    }
    let mean_executed_frac = (exec_den > 0).then(|| exec_sum as f64 / exec_den as f64);
    let moe_site_frac = (moe_dense > 0).then(|| moe_total as f64 / moe_dense as f64);
    Ok(ModelCost {
        tokens,
        total,
        sites,
        fixed_other,
        mean_executed_frac,
        moe_site_frac,
    })
}

/// Analytic per-token cost of the model under `policy`. Dynamic-k has no
/// closed-form expert count, so it takes the trace mean per site; `τ = 0`
/// executes every expert.
pub fn analytic_model_flops(
    model: &DenseModel,
    policy: &GatePolicy,
    trace: &ExecutionTrace,
    seq: usize,
) -> Result<f64> {
    let d = model.config.model_dim as u64;
    let mut total = (model.num_layers() as u64 * attention_flops(d, seq as u64)
        + d * model.config.output_dim() as u64) as f64;
    for (site, c) in site_costs(model) {
        total += match c {
            SiteCost::Fixed(f) => f as f64,
            SiteCost::Moe { expert, router, n } => {
                let k = match *policy {
                    GatePolicy::TopK { k } => k.min(n as usize) as f64,
                    GatePolicy::DynamicK { tau } if tau <= 0.0 => n as f64,
                    GatePolicy::DynamicK { .. } => trace.mean(site),
                };
                k * expert as f64 + router as f64
            }
        };
    }
    Ok(total)
}

/// One evaluated grid point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: String,
    pub policy_param: f64,
    pub analytic_flops: f64,
    pub measured_flops: f64,
    /// Validation loss for the LM, accuracy for the classifier.
    pub metric: f64,
    /// Mean executed experts over MoE sites as a fraction of `n`.
    pub mean_executed_frac: f64,
    /// MoE-site cost (routers included) relative to the dense modules they replaced.
    pub moe_site_frac: f64,
    /// Mean per-token cost per site, keyed by site name.
    pub sites: BTreeMap<String, f64>,
}

/// Write rows as CSV: fixed columns, then one `site:{name}_flops` column
/// per site present in any row.
pub fn write_cost_csv(path: &Path, rows: &[CostReport]) -> Result<()> {
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.sites.keys().cloned()).collect();
    names.sort_by_key(|n| n.parse::<Site>().ok());
    names.dedup();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = [
        "method",
        "policy_param",
        "analytic_flops",
        "measured_flops",
        "metric",
        "mean_executed_frac",
        "moe_site_frac",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(names.iter().map(|n| format!("site:{n}_flops")));
    w.write_record(&header)
        .map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        let mut rec = vec![
            r.method.clone(),
            r.policy_param.to_string(),
            r.analytic_flops.to_string(),
            r.measured_flops.to_string(),
            r.metric.to_string(),
            r.mean_executed_frac.to_string(),
            r.moe_site_frac.to_string(),
        ];
        rec.extend(
            names
                .iter()
                .map(|n| r.sites.get(n).map_or(String::new(), |v| v.to_string())),
        );
        w.write_record(&rec)
            .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read rows written by [`write_cost_csv`].
pub fn read_cost_csv(path: &Path) -> Result<Vec<CostReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let header = r.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::input(format!("{}: missing column {name}", path.display())))
    };
    let idx = [
        col("method")?,
        col("policy_param")?,
        col("analytic_flops")?,
        col("measured_flops")?,
        col("metric")?,
        col("mean_executed_frac")?,
        col("moe_site_frac")?,
    ];
    let site_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix("site:")
                .and_then(|s| s.strip_suffix("_flops"))
                .map(|s| (i, s.to_string()))
        })
        .collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::input(format!("{}: bad number `{s}`", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::io(path, e.into()))?;
        let mut sites = BTreeMap::new();
        for (i, name) in &site_cols {
            if !rec[*i].is_empty() {
                sites.insert(name.clone(), num(&rec[*i])?);
            }
        }
        rows.push(CostReport {
            method: rec[idx[0]].to_string(),
            policy_param: num(&rec[idx[1]])?,
            analytic_flops: num(&rec[idx[2]])?,
            measured_flops: num(&rec[idx[3]])?,
            metric: num(&rec[idx[4]])?,
            mean_executed_frac: num(&rec[idx[5]])?,
            moe_site_frac: num(&rec[idx[6]])?,
            sites,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spot() -> CostParams {
        CostParams::new(64, 4, 16, 8).unwrap()
    }

    #[test]
    fn spot_values() {
        let p = spot();
        assert_eq!(ffn_flops(&p), 32768);
        assert_eq!(dynk_flops_int(&p, 4), 8832);
        assert_eq!(dynk_flops(&p, 4.0) / ffn_flops(&p) as f64, 0.26953125);
        assert_eq!(flops_ratio(&p, 4.0), 0.26953125);
        assert_eq!(dynk_flops(&p, 0.0), 640.0);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(matches!(
            CostParams::new(64, 0, 16, 8),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            CostParams::new(64, 4, 7, 8),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn doubling_width_quadruples_ffn() {
        let a = CostParams::new(32, 4, 8, 4).unwrap();
        let b = CostParams::new(64, 4, 8, 4).unwrap();
        assert_eq!(ffn_flops(&b), 4 * ffn_flops(&a));
    }

    #[test]
    fn all_experts_exceed_dense_by_router_cost() {
        let p = spot();
        assert_eq!(dynk_flops_int(&p, p.n) - ffn_flops(&p), p.router_flops());
    }

    #[test]
    fn worst_case_granularity_ratio() {
        let (d_m, e, d_h) = (64u64, 4u64, 8u64);
        let p = CostParams::new(d_m, e, e * d_m, d_h).unwrap();
        let k = 10.0;
        let want = k / p.n as f64 + (d_h as f64 / d_m as f64) * (1.0 + e as f64) / (2.0 * e as f64);
        assert!((flops_ratio(&p, k) - want).abs() < 1e-15);
    }

    #[test]
    fn break_even_point_has_unit_ratio() {
        let p = spot();
        let k = break_even_k(&p);
        assert!((flops_ratio(&p, k) - 1.0).abs() < 1e-12);
        assert!(flops_ratio(&p, k - 0.5) < 1.0 && flops_ratio(&p, k + 0.5) > 1.0);
    }
}
