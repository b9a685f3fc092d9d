//! Checkpoint (de)serialization of a model pair.
//!
//! The architecture travels in the checkpoint meta under `"arch"`; tensors are
//! named by their parameter key (`front/0.w`, `layer1/m3/fc2.b`, `head/w`,
//! `selector/head0.b`, ...). A sub-model carries only its retained modules.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelPair, ModularModel, Module, ModuleBody, ModuleKind, ModuleLayer};
use crate::error::{Error, Result};
use crate::nn::params::Parameterized;
use crate::nn::{Activation, Checkpoint, DenseLayer, Tensor};
use crate::selector::UnifiedSelector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub index: usize,
    #[serde(flatten)]
    pub kind: ModuleKind,
    /// Hidden width; 0 for residual modules.
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub in_dim: usize,
    pub out_dim: usize,
    pub block_hidden: usize,
    pub n_total: usize,
    pub modules: Vec<ModuleDescriptor>,
}

/// Everything needed to rebuild a model pair apart from its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub input_dim: usize,
    pub front: Vec<usize>,
    pub layers: Vec<LayerDescriptor>,
    pub num_classes: usize,
    pub selector_embed: Vec<usize>,
    pub k: usize,
    pub noise_scale: f64,
}

fn zero_layer(in_dim: usize, out_dim: usize, act: Activation) -> DenseLayer {
    DenseLayer {
        weights: Tensor::zeros(&[out_dim, in_dim]),
        bias: Tensor::zeros(&[out_dim]),
        activation: act,
    }
}

impl ArchDescriptor {
    pub fn of(pair: &ModelPair) -> Self {
        let m = &pair.model;
        Self {
            input_dim: m.input_dim,
            front: m.front.iter().map(DenseLayer::out_dim).collect(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerDescriptor {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    block_hidden: l.block_hidden,
                    n_total: l.n_total,
                    modules: l
                        .modules
                        .iter()
                        .map(|md| ModuleDescriptor {
                            index: md.index,
                            kind: md.kind,
                            hidden: md.body.as_ref().map_or(0, |b| b.hidden.out_dim()),
                        })
                        .collect(),
                })
                .collect(),
            num_classes: m.num_classes(),
            selector_embed: pair.selector.embed.iter().map(DenseLayer::out_dim).collect(),
            k: pair.selector.k,
            noise_scale: pair.selector.noise_scale,
        }
    }

    /// A zero-initialized model pair with this architecture.
    pub fn build_zeroed(&self) -> Result<ModelPair> {
        let mut prev = self.input_dim;
        let mut front = Vec::new();
        for &d in &self.front {
            front.push(zero_layer(prev, d, Activation::Relu));
            prev = d;
        }
        let mut layers = Vec::new();
        for (li, ld) in self.layers.iter().enumerate() {
            let mut modules = Vec::new();
            for md in &ld.modules {
                if md.index >= ld.n_total {
                    return Err(Error::Format(format!("module {} >= width {}", md.index, ld.n_total)));
                }
                let body = match md.kind {
                    ModuleKind::Residual => {
                        if ld.in_dim != ld.out_dim {
                            return Err(Error::Format(format!("residual module in layer {li} with in != out")));
                        }
                        None
                    }
                    ModuleKind::Shrunk { .. } => Some(ModuleBody {
                        hidden: zero_layer(ld.in_dim, md.hidden, Activation::Relu),
                        out: zero_layer(md.hidden, ld.out_dim, Activation::Identity),
                    }),
                };
                modules.push(Module {
                    layer: li,
                    index: md.index,
                    kind: md.kind,
                    body,
                });
            }
            modules.sort_by_key(|m| m.index);
            if modules.windows(2).any(|w| w[0].index == w[1].index) {
                return Err(Error::Format(format!("duplicate module in layer {li}")));
            }
            layers.push(ModuleLayer {
                index: li,
                in_dim: ld.in_dim,
                out_dim: ld.out_dim,
                block_hidden: ld.block_hidden,
                n_total: ld.n_total,
                modules,
            });
        }
        let head_in = layers.last().map_or(prev, |l| l.out_dim);
        let model = ModularModel {
            input_dim: self.input_dim,
            front,
            layers,
            head: zero_layer(head_in, self.num_classes, Activation::Identity),
        };
        let mut embed = Vec::new();
        let mut prev = self.input_dim;
        for &d in &self.selector_embed {
            embed.push(zero_layer(prev, d, Activation::Relu));
            prev = d;
        }
        let heads = self
            .layers
            .iter()
            .map(|l| zero_layer(prev, l.n_total, Activation::Identity))
            .collect();
        let selector = UnifiedSelector {
            embed,
            heads,
            k: self.k,
            noise_scale: self.noise_scale,
        };
        ModelPair::new(model, selector).map_err(|e| Error::Format(format!("inconsistent architecture: {e}")))
    }
}

impl ModelPair {
    /// Serializes into a checkpoint; `extra` is stored next to the architecture.
    pub fn to_checkpoint(&self, extra: Value) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "arch": ArchDescriptor::of(self),
            "extra": extra,
        });
        let tensors = self
            .params()
            .into_iter()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect();
        Ok(Checkpoint { meta, tensors })
    }

    /// Rebuilds a model pair; every tensor must be present with its exact shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(ModelPair, Value)> {
        let arch: ArchDescriptor = serde_json::from_value(
            ckpt.meta
                .get("arch")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no architecture".into()))?,
        )?;
        let extra = ckpt.meta.get("extra").cloned().unwrap_or(Value::Null);
        let mut pair = arch.build_zeroed()?;
        let mut stored: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            if stored.insert(name.as_str(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        let mut used = 0;
        for (key, slot) in pair.params_mut() {
            let name = key.to_string();
            let t = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(format!("tensor `{name}`"), slot.shape(), t.shape()));
            }
            slot.data_mut().copy_from_slice(t.data());
            used += 1;
        }
        if used != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, architecture uses {used}",
                stored.len()
            )));
        }
        Ok((pair, extra))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_checkpoint(Value::Null)?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelPair> {
        Ok(Self::from_checkpoint(&Checkpoint::from_bytes(bytes)?)?.0)
    }

    pub fn save(&self, path: &Path, extra: Value) -> Result<()> {
        std::fs::write(path, self.to_checkpoint(extra)?.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelPair, Value)> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&std::fs::read(path)?)?)
    }
}
