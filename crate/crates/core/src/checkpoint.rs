//! Binary checkpoint: magic, little-endian header length, JSON header, then
//! 64-byte-aligned little-endian f32 blobs at absolute offsets.
//!
//! The header carries a SHA-256 digest over its own canonical form (digest
//! field removed) and every blob, so any corruption fails closed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::clustering::{ExpertPartition, ExpertSlices};
use crate::error::{Error, Result};
use crate::mha::ReplacementMlp;
use crate::model::{
    Activation, Block, DenseModel, FfnKind, FfnSlot, FfnWeights, LayerNormWeights, Linear,
    ModuleForm, ProjSlot, Site, SiteKind, TransformerConfig,
};
use crate::moe::MoeLayer;
use crate::routing::{GatePolicy, Router, RouterOutput};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"D2DMOE\0\x01";
pub const ALIGN: u64 = 64;
const PREFIX: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct PartitionJson {
    layer: usize,
    n_experts: usize,
    expert_size: usize,
    assignment: Vec<usize>,
}

fn align(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

fn moe_names(site: Site) -> [String; 5] {
    let (l, s) = (site.layer, site.kind.as_str());
    ["W1", "b1", "W2", "b2", "Wg"].map(|p| format!("moe.{l}.{s}.{p}"))
}

fn router_names(site: Site) -> [String; 4] {
    let (l, s) = (site.layer, site.kind.as_str());
    ["Wh", "bh", "Wo", "bo"].map(|p| format!("router.{l}.{s}.{p}"))
}

/// Every tensor of `model` with its checkpoint name, in a fixed order.
pub fn named_tensors(model: &DenseModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .trainable()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for site in model.moe_sites() {
        let layer = model.moe_layer(site).expect("moe site");
        let cat = layer.slices.concat();
        let names = moe_names(site);
        out.push((names[0].clone(), cat.w1));
        out.push((names[1].clone(), cat.b1));
        out.push((names[2].clone(), cat.w2));
        out.push((names[3].clone(), cat.b2));
        if let Some(wg) = cat.wg {
            out.push((names[4].clone(), wg));
        }
        if let Some(r) = &layer.router {
            let rn = router_names(site);
            for (n, t) in rn.into_iter().zip([&r.wh, &r.bh, &r.wo, &r.bo]) {
                out.push((n, t.clone()));
            }
        }
    }
    out
}

fn module_entry(model: &DenseModel, site: Site) -> Value {
    match model.form(site).expect("site exists") {
        ModuleForm::Dense => json!({"form": "dense"}),
        ModuleForm::ReplacedMha => json!({"form": "replaced-mha"}),
        ModuleForm::Moe => {
            let m = model.moe_layer(site).expect("moe");
            let p = PartitionJson {
                layer: site.layer,
                n_experts: m.partition.n_experts,
                expert_size: m.partition.expert_size,
                assignment: m.partition.assignment.clone(),
            };
            json!({
                "form": "moe",
                "partition": p,
                "activation": m.activation,
                "policy": m.policy,
                "router": m.router.as_ref().map(|r| json!({"output": r.output})),
                "source": format!("{:016x}", m.slices.source),
            })
        }
    }
}

/// Serialize `model` to checkpoint bytes.
pub fn to_bytes(model: &DenseModel) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let modules: Map<String, Value> = model
        .all_sites()
        .into_iter()
        .map(|s| (s.to_string(), module_entry(model, s)))
        .collect();
    let config = serde_json::to_value(&model.config)?;
    // Offsets depend on the header length; iterate until stable.
    let mut data_start = align(PREFIX + 4096);
    loop {
        let mut entries = Map::new();
        let mut off = data_start;
        for (name, t) in &tensors {
            let byte_len = 4 * t.numel() as u64;
            let e = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: off,
                byte_len,
            };
            entries.insert(name.clone(), serde_json::to_value(e)?);
            off = align(off + byte_len);
        }
        let mut header = Map::new();
        header.insert("config".into(), config.clone());
        header.insert("modules".into(), Value::Object(modules.clone()));
        header.insert("tensors".into(), Value::Object(entries));
        let blob = write_blobs(&tensors, data_start);
        let digest = digest_of(&Value::Object(header.clone()), &blob);
        header.insert("digest".into(), Value::String(digest));
        let hbytes = serde_json::to_vec(&Value::Object(header))?;
        let need = align(PREFIX + hbytes.len() as u64);
        if need <= data_start {
            let mut out = Vec::with_capacity(data_start as usize + blob.len());
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&hbytes);
            out.resize(data_start as usize, 0);
            out.extend_from_slice(&blob);
            return Ok(out);
        }
        data_start = need;
    }
}

/// Blob region, laid out as if it started at absolute offset `start`.
fn write_blobs(tensors: &[(String, Tensor)], start: u64) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, t) in tensors {
        let pos = start + out.len() as u64;
        debug_assert_eq!(pos % ALIGN, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let pad = (align(start + out.len() as u64) - (start + out.len() as u64)) as usize;
        out.extend(std::iter::repeat_n(0u8, pad));
    }
    out
}

fn digest_of(header_without_digest: &Value, blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(header_without_digest).expect("json"));
    h.update(blob);
    format!("{:x}", h.finalize())
}

pub fn save_checkpoint(model: &DenseModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenseModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    entries: BTreeMap<String, TensorEntry>,
    header_end: u64,
}

impl Reader<'_> {
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::format(PREFIX, format!("missing tensor `{name}`")))?;
        if e.shape != shape {
            return Err(Error::format(
                e.offset,
                format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    e.shape
                ),
            ));
        }
        self.read(name, e)
    }

    fn tensor_any(&self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::format(PREFIX, format!("missing tensor `{name}`")))?;
        self.read(name, e)
    }

    fn read(&self, name: &str, e: &TensorEntry) -> Result<Tensor> {
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f32" {
            return Err(Error::format(
                e.offset,
                format!("tensor `{name}` has dtype {}", e.dtype),
            ));
        }
        if e.byte_len != 4 * numel as u64 {
            return Err(Error::format(
                e.offset,
                format!(
                    "tensor `{name}` byte_len {} for {numel} elements",
                    e.byte_len
                ),
            ));
        }
        if e.offset % ALIGN != 0 || e.offset < self.header_end {
            return Err(Error::format(
                e.offset,
                format!("tensor `{name}` offset not aligned or inside header"),
            ));
        }
        let end = e
            .offset
            .checked_add(e.byte_len)
            .filter(|&x| x <= self.bytes.len() as u64)
            .ok_or_else(|| {
                Error::format(
                    self.bytes.len() as u64,
                    format!("truncated blob for `{name}`"),
                )
            })?;
        let data = self.bytes[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| Error::format(e.offset, err.to_string()))
    }
}

fn fmt_err(offset: u64) -> impl Fn(serde_json::Error) -> Error {
    move |e| Error::format(offset, format!("bad header: {e}"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenseModel> {
    if bytes.len() < PREFIX as usize {
        return Err(Error::format(
            bytes.len() as u64,
            "file shorter than the fixed prefix",
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "bad magic or version"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::format(
                8,
                format!("header length {hlen} exceeds file size {}", bytes.len()),
            )
        })?;
    let mut header: Value = serde_json::from_slice(&bytes[PREFIX as usize..header_end as usize])
        .map_err(fmt_err(PREFIX))?;
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::format(PREFIX, "header is not an object"))?;
    let digest = match obj.remove("digest") {
        Some(Value::String(s)) => s,
        _ => return Err(Error::format(PREFIX, "header lacks digest")),
    };
    let entries: BTreeMap<String, TensorEntry> =
        serde_json::from_value(obj.get("tensors").cloned().unwrap_or(Value::Null))
            .map_err(fmt_err(PREFIX))?;
    let data_start = entries
        .values()
        .map(|e| e.offset)
        .min()
        .unwrap_or(align(header_end));
    if data_start < header_end || data_start as usize > bytes.len() {
        return Err(Error::format(
            data_start,
            "blob region overlaps header or lies past end of file",
        ));
    }
    if digest_of(&header, &bytes[data_start as usize..]) != digest {
        return Err(Error::format(
            PREFIX,
            "digest mismatch: header or blobs corrupted",
        ));
    }
    let obj = header.as_object().expect("object");
    let config: TransformerConfig =
        serde_json::from_value(obj.get("config").cloned().unwrap_or(Value::Null))
            .map_err(fmt_err(PREFIX))?;
    config
        .validate()
        .map_err(|e| Error::format(PREFIX, format!("invalid config: {e}")))?;
    let modules = obj
        .get("modules")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::format(PREFIX, "missing module map"))?;
    let rd = Reader {
        bytes,
        entries,
        header_end,
    };
    build(&rd, &config, modules)
}

fn form_of(modules: &Map<String, Value>, site: Site) -> Result<(&str, &Value)> {
    let v = modules
        .get(&site.to_string())
        .ok_or_else(|| Error::format(PREFIX, format!("module map lacks {site}")))?;
    let f = v
        .get("form")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format(PREFIX, format!("{site} has no form")))?;
    Ok((f, v))
}

fn read_moe(rd: &Reader, site: Site, v: &Value, d: usize, gated: bool) -> Result<MoeLayer> {
    let bad = |m: &str| Error::format(PREFIX, format!("{site}: {m}"));
    let p: PartitionJson =
        serde_json::from_value(v.get("partition").cloned().unwrap_or(Value::Null))
            .map_err(fmt_err(PREFIX))?;
    if p.layer != site.layer {
        return Err(bad("partition layer mismatch"));
    }
    let partition =
        ExpertPartition::new(p.n_experts, p.assignment).map_err(|e| bad(&e.to_string()))?;
    if partition.expert_size != p.expert_size {
        return Err(bad("expert_size mismatch"));
    }
    let activation: Activation =
        serde_json::from_value(v.get("activation").cloned().unwrap_or(Value::Null))
            .map_err(fmt_err(PREFIX))?;
    let policy: GatePolicy =
        serde_json::from_value(v.get("policy").cloned().unwrap_or(Value::Null))
            .map_err(fmt_err(PREFIX))?;
    let source = v
        .get("source")
        .and_then(Value::as_str)
        .and_then(|s| u64::from_str_radix(s, 16).ok())
        .ok_or_else(|| bad("bad source fingerprint"))?;
    let hidden = partition.assignment.len();
    let names = moe_names(site);
    let ffn = FfnWeights {
        w1: rd.tensor(&names[0], &[d, hidden])?,
        b1: rd.tensor(&names[1], &[hidden])?,
        w2: rd.tensor(&names[2], &[hidden, d])?,
        b2: rd.tensor(&names[3], &[d])?,
        wg: if gated {
            Some(rd.tensor(&names[4], &[d, hidden])?)
        } else {
            None
        },
    };
    let slices = ExpertSlices::from_concat(&ffn, partition.n_experts, source)?;
    let router = match v.get("router") {
        None | Some(Value::Null) => None,
        Some(r) => {
            let output: RouterOutput =
                serde_json::from_value(r.get("output").cloned().unwrap_or(Value::Null))
                    .map_err(fmt_err(PREFIX))?;
            let rn = router_names(site);
            let wh = rd.tensor_any(&rn[0])?;
            let dh = wh.cols();
            if wh.shape() != [d, dh] {
                return Err(bad("router Wh shape"));
            }
            Some(Router {
                wh,
                bh: rd.tensor(&rn[1], &[dh])?,
                wo: rd.tensor(&rn[2], &[dh, partition.n_experts])?,
                bo: rd.tensor(&rn[3], &[partition.n_experts])?,
                output,
            })
        }
    };
    let layer = MoeLayer {
        site,
        activation,
        partition,
        slices,
        router,
        policy,
    };
    layer.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(layer)
}

fn build(rd: &Reader, c: &TransformerConfig, modules: &Map<String, Value>) -> Result<DenseModel> {
    let d = c.model_dim;
    let h = c.hidden_dim();
    let ln = |p: &str| -> Result<LayerNormWeights> {
        Ok(LayerNormWeights {
            gamma: rd.tensor(&format!("{p}.gamma"), &[d])?,
            beta: rd.tensor(&format!("{p}.beta"), &[d])?,
        })
    };
    let mut blocks = Vec::with_capacity(c.num_layers);
    for l in 0..c.num_layers {
        let proj = |kind: SiteKind| -> Result<ProjSlot> {
            let site = Site::proj(l, kind);
            let s = kind.as_str();
            let (form, v) = form_of(modules, site)?;
            Ok(match form {
                "dense" => ProjSlot::Dense(Linear {
                    weight: rd.tensor(&format!("layers.{l}.attn.{s}.weight"), &[d, d])?,
                    bias: rd.tensor(&format!("layers.{l}.attn.{s}.bias"), &[d])?,
                }),
                "replaced-mha" => {
                    let w_in = rd.tensor_any(&format!("mha.{l}.{s}.W_in"))?;
                    let hh = w_in.cols();
                    if w_in.shape() != [d, hh] {
                        return Err(Error::format(
                            PREFIX,
                            format!("{site}: W_in shape {:?}", w_in.shape()),
                        ));
                    }
                    ProjSlot::Replaced(ReplacementMlp {
                        w_in,
                        b_in: rd.tensor(&format!("mha.{l}.{s}.b_in"), &[hh])?,
                        w_out: rd.tensor(&format!("mha.{l}.{s}.W_out"), &[hh, d])?,
                        b_out: rd.tensor(&format!("mha.{l}.{s}.b_out"), &[d])?,
                        provenance: site,
                    })
                }
                "moe" => ProjSlot::Moe(Box::new(read_moe(rd, site, v, d, false)?)),
                other => {
                    return Err(Error::format(
                        PREFIX,
                        format!("{site}: unknown form `{other}`"),
                    ))
                }
            })
        };
        let (q, k, v, o) = (
            proj(SiteKind::Q)?,
            proj(SiteKind::K)?,
            proj(SiteKind::V)?,
            proj(SiteKind::O)?,
        );
        let gated = c.ffn_kind == FfnKind::Gated;
        let site = Site::ffn(l);
        let (form, mv) = form_of(modules, site)?;
        let ffn = match form {
            "dense" => FfnSlot::Dense(FfnWeights {
                w1: rd.tensor(&format!("layers.{l}.ffn.W1"), &[d, h])?,
                b1: rd.tensor(&format!("layers.{l}.ffn.b1"), &[h])?,
                w2: rd.tensor(&format!("layers.{l}.ffn.W2"), &[h, d])?,
                b2: rd.tensor(&format!("layers.{l}.ffn.b2"), &[d])?,
                wg: if gated {
                    Some(rd.tensor(&format!("layers.{l}.ffn.Wg"), &[d, h])?)
                } else {
                    None
                },
            }),
            "moe" => FfnSlot::Moe(Box::new(read_moe(rd, site, mv, d, gated)?)),
            other => {
                return Err(Error::format(
                    PREFIX,
                    format!("{site}: unknown form `{other}`"),
                ))
            }
        };
        blocks.push(Block {
            ln1: ln(&format!("layers.{l}.ln1"))?,
            q,
            k,
            v,
            o,
            ln2: ln(&format!("layers.{l}.ln2"))?,
            ffn,
        });
    }
    Ok(DenseModel {
        config: c.clone(),
        tok_emb: rd.tensor("tok_emb", &[c.vocab_size, d])?,
        pos_emb: rd.tensor("pos_emb", &[c.context_length, d])?,
        blocks,
        ln_f: ln("ln_f")?,
        head: Linear {
            weight: rd.tensor("head.weight", &[d, c.output_dim()])?,
            bias: rd.tensor("head.bias", &[c.output_dim()])?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TaskHead, TransformerConfig};

    fn small() -> DenseModel {
        let c = TransformerConfig {
            vocab_size: 32,
            context_length: 8,
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            expansion_factor: 2,
            ffn_kind: FfnKind::Gated,
            activation: Activation::Relu,
            task_head: TaskHead::Lm,
            causal: None,
        };
        DenseModel::build(c, 1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(named_tensors(&m), named_tensors(&back));
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn offsets_are_aligned() {
        let bytes = to_bytes(&small()).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        for (_, e) in v["tensors"].as_object().unwrap() {
            assert_eq!(e["offset"].as_u64().unwrap() % 64, 0);
        }
    }

    #[test]
    fn bad_magic_and_truncation_fail() {
        let bytes = to_bytes(&small()).unwrap();
        let mut b = bytes.clone();
        b[7] = 2;
        assert!(matches!(
            from_bytes(&b),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
