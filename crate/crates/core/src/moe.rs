//! Executable MoE layers assembled from expert slices, a router and a gate policy.

use std::collections::BTreeMap;
use std::path::Path;

use crate::clustering::{slice_ffn, ExpertPartition, ExpertSlices};
use crate::error::{Error, Result};
use crate::model::{
    add_bias_inplace, forward, Activation, Capture, DenseModel, FfnSlot, ProjSlot, Site, SiteKind,
    TokenBatch,
};
use crate::routing::{expert_activation_sums, router_targets, GatePolicy, Router, RouterDataset};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub site: Site,
    pub activation: Activation,
    pub partition: ExpertPartition,
    pub slices: ExpertSlices,
    /// Without a router only policies that select every expert are allowed.
    pub router: Option<Router>,
    pub policy: GatePolicy,
}

impl MoeLayer {
    pub fn n_experts(&self) -> usize {
        self.slices.n_experts()
    }

    pub fn expert_size(&self) -> usize {
        self.partition.expert_size
    }

    fn selects_all(&self) -> bool {
        match self.policy {
            GatePolicy::DynamicK { tau } => tau == 0.0,
            GatePolicy::TopK { k } => k >= self.n_experts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate(self.n_experts())?;
        match &self.router {
            Some(r)
                if r.n_experts() != self.n_experts() || r.d_model() != self.slices.d_model() =>
            {
                Err(Error::contract(format!(
                    "router at {} maps {} -> {}, layer needs {} -> {}",
                    self.site,
                    r.d_model(),
                    r.n_experts(),
                    self.slices.d_model(),
                    self.n_experts()
                )))
            }
            None if !self.selects_all() => Err(Error::contract(format!(
                "MoE site {} has no router for a sparse policy",
                self.site
            ))),
            _ => Ok(()),
        }
    }
}

pub struct MoeOutput {
    pub output: Tensor,
    /// Executed experts per token.
    pub counts: Vec<u32>,
    pub masks: Option<Vec<Vec<bool>>>,
    /// Tokens whose scores were all zero (every expert selected).
    pub all_zero_tokens: u64,
}

/// `b2 + Σ_{i selected} E_i(z)` per token; experts are summed unweighted in index order.
pub fn moe_forward(layer: &MoeLayer, z: &Tensor, keep_masks: bool) -> Result<MoeOutput> {
    let d = layer.slices.d_model();
    if z.rank() != 2 || z.cols() != d {
        return Err(Error::dim(
            "moe_forward",
            format!("input {:?}, model dim {d}", z.shape()),
        ));
    }
    layer.validate()?;
    let tokens = z.rows();
    let n = layer.n_experts();
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(tokens);
    let mut all_zero_tokens = 0;
    match &layer.router {
        Some(router) if !layer.selects_all() => {
            let scores = router.forward(z)?;
            for t in 0..tokens {
                let dec = layer.policy.decide(scores.row(t));
                all_zero_tokens += dec.all_zero as u64;
                masks.push(dec.mask);
            }
        }
        _ => masks.resize(tokens, vec![true; n]),
    }
    let mut out = Tensor::zeros(&[tokens, d]);
    add_bias_inplace(&mut out, &layer.slices.b2);
    for (i, e) in layer.slices.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..tokens).filter(|&t| masks[t][i]).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() == tokens {
            let y = e.forward(layer.activation, z)?;
            out.data_mut()
                .iter_mut()
                .zip(y.data())
                .for_each(|(o, &v)| *o += v);
        } else {
            let y = e.forward(layer.activation, &z.select_rows(&rows)?)?;
            for (k, &t) in rows.iter().enumerate() {
                out.row_mut(t)
                    .iter_mut()
                    .zip(y.row(k))
                    .for_each(|(o, &v)| *o += v);
            }
        }
    }
    let counts = masks
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count() as u32)
        .collect();
    Ok(MoeOutput {
        output: out,
        counts,
        masks: keep_masks.then_some(masks),
        all_zero_tokens,
    })
}

/// Per-site executed-expert counts, aligned with the token stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecutionTrace {
    pub counts: BTreeMap<Site, Vec<u32>>,
    pub masks: BTreeMap<Site, Vec<Vec<bool>>>,
    pub all_zero: BTreeMap<Site, u64>,
}

impl ExecutionTrace {
    pub fn record(
        &mut self,
        site: Site,
        counts: Vec<u32>,
        masks: Option<Vec<Vec<bool>>>,
        all_zero: u64,
    ) {
        self.counts.entry(site).or_default().extend(counts);
        if let Some(m) = masks {
            self.masks.entry(site).or_default().extend(m);
        }
        *self.all_zero.entry(site).or_default() += all_zero;
    }

    /// Append `other`, which follows `self` in the token stream.
    pub fn merge(&mut self, other: ExecutionTrace) {
        for (s, c) in other.counts {
            self.counts.entry(s).or_default().extend(c);
        }
        for (s, m) in other.masks {
            self.masks.entry(s).or_default().extend(m);
        }
        for (s, z) in other.all_zero {
            *self.all_zero.entry(s).or_default() += z;
        }
    }

    pub fn tokens(&self) -> usize {
        self.counts.values().next().map_or(0, Vec::len)
    }

    pub fn total(&self, site: Site) -> u64 {
        self.counts
            .get(&site)
            .map_or(0, |c| c.iter().map(|&v| v as u64).sum())
    }

    pub fn mean(&self, site: Site) -> f64 {
        let c = self.counts.get(&site).map_or(0, Vec::len);
        if c == 0 {
            0.0
        } else {
            self.total(site) as f64 / c as f64
        }
    }
}

/// One site to convert: its partition and (optionally) its router.
#[derive(Clone, Debug)]
pub struct SiteConversion {
    pub site: Site,
    pub partition: ExpertPartition,
    pub router: Option<Router>,
}

/// Replace the listed sites with MoE layers. FFN sites and replaced MHA
/// projections qualify; a raw projection must be replaced first.
pub fn convert_model(
    model: &DenseModel,
    sites: Vec<SiteConversion>,
    policy: GatePolicy,
) -> Result<DenseModel> {
    let mut out = model.clone();
    for conv in sites {
        let site = conv.site;
        let block = out
            .blocks
            .get_mut(site.layer)
            .ok_or_else(|| Error::contract(format!("site {site} beyond layer count")))?;
        let (ffn, act) = match site.kind {
            SiteKind::Ffn => match &block.ffn {
                FfnSlot::Dense(f) => (f.clone(), model.config.activation),
                FfnSlot::Moe(_) => return Err(Error::contract(format!("site {site} is already MoE"))),
            },
            kind => match block.proj(kind) {
                ProjSlot::Replaced(m) => (m.as_ffn(), Activation::Relu),
                ProjSlot::Dense(_) => {
                    return Err(Error::contract(format!(
                        "site {site} is a raw attention projection; replace it with an MLP before MoE conversion"
                    )))
                }
                ProjSlot::Moe(_) => return Err(Error::contract(format!("site {site} is already MoE"))),
            },
        };
        let slices = slice_ffn(&ffn, &conv.partition)?;
        let layer = MoeLayer {
            site,
            activation: act,
            partition: conv.partition,
            slices,
            router: conv.router,
            policy,
        };
        layer.validate()?;
        let boxed = Box::new(layer);
        match site.kind {
            SiteKind::Ffn => block.ffn = FfnSlot::Moe(boxed),
            kind => *block.proj_mut(kind) = ProjSlot::Moe(boxed),
        }
    }
    Ok(out)
}

/// Set the gate policy of every MoE site. No retraining involved.
pub fn set_policy(model: &mut DenseModel, policy: GatePolicy) -> Result<()> {
    for site in model.moe_sites() {
        let layer = model.moe_layer_mut(site).expect("moe site");
        layer.policy = policy;
        layer.validate()?;
    }
    Ok(())
}

/// Run the model over `batches` and concatenate the execution traces.
pub fn trace_batches(model: &DenseModel, batches: &[TokenBatch]) -> Result<ExecutionTrace> {
    let mut trace = ExecutionTrace::default();
    for b in batches {
        let (_, _, t) = forward(model, b, &Capture::none())?;
        trace.merge(t);
    }
    Ok(trace)
}

/// Router training data for one MoE site, tied to the expert slices it was
/// computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRouterData {
    pub site: Site,
    /// Fingerprint of the dense weights the experts were sliced from.
    pub source: u64,
    /// Inputs and per-expert output norms.
    pub data: RouterDataset,
    /// Per-expert activation sums, for the classifier baseline.
    pub sums: Tensor,
}

/// Capture every MoE site's input on `batches` and compute router targets
/// from that site's experts.
pub fn collect_router_data(
    model: &DenseModel,
    batches: &[TokenBatch],
) -> Result<Vec<SiteRouterData>> {
    let sites = model.moe_sites();
    if sites.is_empty() {
        return Err(Error::contract("model has no MoE sites"));
    }
    let d = model.config.model_dim;
    let mut bufs: Vec<Vec<f32>> = vec![Vec::new(); sites.len()];
    let cap = Capture::io_at(sites.iter().copied());
    for b in batches {
        let (_, tr, _) = forward(model, b, &cap)?;
        for (buf, s) in bufs.iter_mut().zip(&sites) {
            buf.extend_from_slice(tr.input(*s).expect("captured site").data());
        }
    }
    sites
        .iter()
        .zip(bufs)
        .map(|(&site, buf)| {
            let layer = model.moe_layer(site).expect("moe site");
            let z = Tensor::new(vec![buf.len() / d, d], buf)?;
            let targets = router_targets(&layer.slices, layer.activation, &z)?;
            let sums = expert_activation_sums(&layer.slices, layer.activation, &z)?;
            Ok(SiteRouterData {
                site,
                source: layer.slices.source,
                data: RouterDataset::new(z, targets)?,
                sums,
            })
        })
        .collect()
}

/// Install `router` at `site`. `source` must name the expert slices the
/// router's training data came from.
pub fn attach_router(
    model: &mut DenseModel,
    site: Site,
    source: u64,
    router: Router,
) -> Result<()> {
    let layer = model
        .moe_layer_mut(site)
        .ok_or_else(|| Error::contract(format!("site {site} is not MoE")))?;
    if layer.slices.source != source {
        return Err(Error::contract(format!(
            "router for {site} was trained on experts from a different source ({source:016x} vs {:016x})",
            layer.slices.source
        )));
    }
    let old = layer.router.replace(router);
    if let Err(e) = layer.validate() {
        layer.router = old;
        return Err(e);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountHistogramRow {
    pub site: Site,
    pub policy_param: f64,
    pub bucket: u32,
    pub count: u64,
}

/// Per-site histograms of executed-expert counts for each policy.
pub fn per_token_expert_counts(
    model: &DenseModel,
    batches: &[TokenBatch],
    policies: &[GatePolicy],
) -> Result<(Vec<(GatePolicy, ExecutionTrace)>, Vec<CountHistogramRow>)> {
    let sites = model.moe_sites();
    if sites.is_empty() {
        return Err(Error::contract("model has no MoE sites"));
    }
    let mut traces = Vec::new();
    let mut rows = Vec::new();
    for &p in policies {
        let mut m = model.clone();
        set_policy(&mut m, p)?;
        let tr = trace_batches(&m, batches)?;
        for &site in &sites {
            let n = m.moe_layer(site).unwrap().n_experts();
            let mut hist = vec![0u64; n + 1];
            for &c in tr.counts.get(&site).map(Vec::as_slice).unwrap_or(&[]) {
                hist[c as usize] += 1;
            }
            for (bucket, &count) in hist.iter().enumerate() {
                rows.push(CountHistogramRow {
                    site,
                    policy_param: p.param(),
                    bucket: bucket as u32,
                    count,
                });
            }
        }
        traces.push((p, tr));
    }
    Ok((traces, rows))
}

pub fn write_histogram_csv(path: &Path, rows: &[CountHistogramRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["site", "policy_param", "bucket", "count"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.site.to_string(),
            r.policy_param.to_string(),
            r.bucket.to_string(),
            r.count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One bitset row (`0`/`1` characters) per token per site.
pub fn write_mask_dump(path: &Path, trace: &ExecutionTrace) -> Result<()> {
    let mut s = String::new();
    for (site, masks) in &trace.masks {
        for (t, m) in masks.iter().enumerate() {
            let bits: String = m.iter().map(|&b| if b { '1' } else { '0' }).collect();
            s.push_str(&format!("{site},{t},{bits}\n"));
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::split_ffn;
    use crate::model::FfnWeights;
    use crate::rng;

    #[test]
    fn planted_router_tau_one_picks_largest_norm_expert() {
        // Two experts of one neuron each, d_m = 2, relu.
        let ffn = FfnWeights {
            w1: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            b2: Tensor::from_vec(vec![0.5, 0.5]),
            wg: None,
        };
        let partition = ExpertPartition::new(2, vec![0, 1]).unwrap();
        let slices = slice_ffn(&ffn, &partition).unwrap();
        // Router reproducing ‖E_0‖ = relu(x0), ‖E_1‖ = 2·relu(x1) exactly.
        let router = Router {
            wh: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bh: Tensor::zeros(&[2]),
            wo: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            bo: Tensor::zeros(&[2]),
            output: crate::routing::RouterOutput::Abs,
        };
        let layer = MoeLayer {
            site: Site::ffn(0),
            activation: Activation::Relu,
            partition,
            slices,
            router: Some(router),
            policy: GatePolicy::DynamicK { tau: 1.0 },
        };
        let z = Tensor::matrix(2, 2, vec![3.0, 1.0, 1.0, 2.0]).unwrap();
        let out = moe_forward(&layer, &z, false).unwrap();
        // token 0: norms [3, 2] -> expert 0 -> [3.5, 0.5]; token 1: [1, 4] -> expert 1 -> [0.5, 4.5]
        assert_eq!(out.output.data(), &[3.5, 0.5, 0.5, 4.5]);
        assert_eq!(out.counts, vec![1, 1]);
    }

    #[test]
    fn select_all_matches_dense() {
        let mut r = rng::stream(3, "t");
        let ffn = FfnWeights::init(&mut r, 8, 32, true, 0.1);
        let (partition, slices) = split_ffn(&ffn, 4, 0).unwrap();
        let router = Router::init(8, 2, 4, crate::routing::RouterOutput::Abs, 1);
        let z = rng::normal_tensor(&mut r, &[10, 8], 1.0);
        let dense = ffn.forward(Activation::Relu, &z).unwrap();
        for policy in [GatePolicy::DynamicK { tau: 0.0 }, GatePolicy::TopK { k: 4 }] {
            let layer = MoeLayer {
                site: Site::ffn(0),
                activation: Activation::Relu,
                partition: partition.clone(),
                slices: slices.clone(),
                router: Some(router.clone()),
                policy,
            };
            let out = moe_forward(&layer, &z, false).unwrap();
            assert!(out.output.max_abs_diff(&dense) < 1e-5);
            assert!(out.counts.iter().all(|&c| c == 4));
        }
    }

    #[test]
    fn missing_router_with_sparse_policy_is_contract_error() {
        let mut r = rng::stream(1, "t");
        let ffn = FfnWeights::init(&mut r, 4, 8, false, 0.1);
        let (partition, slices) = split_ffn(&ffn, 2, 0).unwrap();
        let layer = MoeLayer {
            site: Site::ffn(0),
            activation: Activation::Relu,
            partition,
            slices,
            router: None,
            policy: GatePolicy::TopK { k: 1 },
        };
        assert!(matches!(
            moe_forward(&layer, &Tensor::zeros(&[1, 4]), false),
            Err(Error::Contract(_))
        ));
    }
}
