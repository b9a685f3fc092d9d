//! Modularized cloud model.
//!
//! A model is `front blocks → module layers → head`. Each module layer holds
//! `N` substitutable modules sharing input/output dims; a sample's output is
//! the gate-weighted sum of its activated modules:
//! `f(x) = Σ_{i∈A} g_i(x)·f_i(x)`.
//!
//! A materialized sub-model keeps only some modules per layer. Its selector
//! still scores all `N` modules; the activated set is the top-k among the
//! retained ones, and their gates are rescaled so the activated mass matches
//! the mass the full model would have activated. If the full model's
//! activated set is already retained, the scale factor is exactly 1 and the
//! sub-model reproduces the cloud forward bit-for-bit.

mod cost;
mod io;
mod spec;

pub use cost::{ResourceCost, BYTES_PER_PARAM, DIMENSION_NAMES, MEM_FACTOR, TRAIN_MACS_FACTOR};
pub use io::ArchDescriptor;
pub use spec::{LayerDecision, RoutingDecision, SubModelSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamGroup, ParamKey, Parameterized};
use crate::nn::tape::{Tape, Var};
use crate::nn::{layer::validate_stack, top_k, Activation, DenseLayer, Tensor};
use crate::selector::{Routing, UnifiedSelector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleKind {
    /// Same structure as the original block with `width_fraction` of its hidden units.
    Shrunk { width_fraction: f64 },
    /// Parameter-free bypass: contributes `gate·x`.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleBody {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub layer: usize,
    pub index: usize,
    pub kind: ModuleKind,
    /// `None` for residual modules.
    pub body: Option<ModuleBody>,
}

impl Module {
    pub fn param_count(&self) -> usize {
        self.body
            .as_ref()
            .map_or(0, |b| b.hidden.param_count() + b.out.param_count())
    }

    /// Forward multiply-accumulates per sample: `in·h' + h'·out` for a shrunk
    /// module, `in` (the gated add) for a residual one.
    pub fn forward_macs(&self, in_dim: usize) -> u64 {
        match &self.body {
            Some(b) => b.hidden.forward_macs() + b.out.forward_macs(),
            None => in_dim as u64,
        }
    }

    pub fn cost(&self, in_dim: usize) -> ResourceCost {
        match self.kind {
            ModuleKind::Residual => ResourceCost {
                comm_bytes: 0,
                compute_macs: self.forward_macs(in_dim),
                mem_bytes: 0,
            },
            ModuleKind::Shrunk { .. } => ResourceCost::for_params(self.param_count(), self.forward_macs(in_dim)),
        }
    }

    fn group(&self) -> ParamGroup {
        ParamGroup::Module {
            layer: self.layer,
            index: self.index,
        }
    }

    fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.body {
            None => Ok(x),
            Some(b) => {
                let h = b.hidden.forward_tape(tape, x, self.group(), "fc1.")?;
                b.out.forward_tape(tape, h, self.group(), "fc2.")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleLayer {
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Hidden width of the original (unshrunk) block.
    pub block_hidden: usize,
    /// Width `N` of the layer in the cloud model.
    pub n_total: usize,
    /// Retained modules, ascending by index (all of them in the cloud model).
    pub modules: Vec<Module>,
}

impl ModuleLayer {
    pub fn is_complete(&self) -> bool {
        self.modules.len() == self.n_total
    }

    pub fn module(&self, index: usize) -> Option<&Module> {
        self.modules
            .binary_search_by_key(&index, |m| m.index)
            .ok()
            .map(|p| &self.modules[p])
    }

    pub fn retained(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.index).collect()
    }

    /// Gated sum over the modules in `active` using the raw gate weights.
    ///
    /// `x` is `[B, in]`, `gates` is `[B, N]`, `active[b]` lists activated
    /// module indices of row `b`.
    pub fn forward(&self, x: &Tensor, gates: &Tensor, active: &[Vec<usize>]) -> Result<Tensor> {
        let x = x.clone().as_matrix();
        let gates = gates.clone().as_matrix();
        let batch = x.rows();
        if gates.rows() != batch || gates.cols() != self.n_total || active.len() != batch {
            return Err(Error::shape("layer routing", &[batch, self.n_total], gates.shape()));
        }
        let mut mask = vec![false; batch * self.n_total];
        for (r, set) in active.iter().enumerate() {
            for &i in set {
                if self.module(i).is_none() {
                    return Err(Error::Routing(format!(
                        "module {i} is not present in layer {}",
                        self.index
                    )));
                }
                mask[r * self.n_total + i] = true;
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(gates);
        let y = self.forward_tape(&mut tape, xv, wv, mask)?;
        Ok(tape.value(y).clone())
    }

    fn forward_tape(&self, tape: &mut Tape, x: Var, weights: Var, mask: Vec<bool>) -> Result<Var> {
        let n = self.n_total;
        let batch = tape.value(x).rows();
        let mut inputs: Vec<Option<Var>> = vec![None; n];
        for m in &self.modules {
            if (0..batch).any(|r| mask[r * n + m.index]) {
                inputs[m.index] = Some(m.forward_tape(tape, x)?);
            }
        }
        tape.gated_sum(&inputs, weights, mask)
    }

    fn cost(&self) -> ResourceCost {
        self.modules.iter().map(|m| m.cost(self.in_dim)).sum()
    }
}

/// Description of a module layer for [`modularize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleLayerShape {
    pub out_dim: usize,
    /// Hidden units of the original block.
    pub hidden: usize,
    pub n_modules: usize,
}

/// Architecture of a modular model and its selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Output widths of ordinary ReLU blocks before the first module layer.
    pub front: Vec<usize>,
    pub module_layers: Vec<ModuleLayerShape>,
    pub num_classes: usize,
    /// Cycled over the non-residual modules of each layer.
    pub shrink_fractions: Vec<f64>,
    pub include_residual: bool,
    /// Hidden widths of the selector's embedding network.
    pub selector_embed: Vec<usize>,
    pub k: usize,
    pub noise_scale: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            input_dim: 32,
            front: vec![32],
            module_layers: vec![
                ModuleLayerShape {
                    out_dim: 32,
                    hidden: 32,
                    n_modules: 16,
                };
                2
            ],
            num_classes: 8,
            shrink_fractions: vec![0.25, 0.5],
            include_residual: true,
            selector_embed: vec![16],
            k: 2,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModularModel {
    pub input_dim: usize,
    pub front: Vec<DenseLayer>,
    pub layers: Vec<ModuleLayer>,
    pub head: DenseLayer,
}

impl ModularModel {
    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n_total).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// log2 of the number of distinct sub-models: `Σ_l N^(l)`.
    pub fn design_space_log2(&self) -> usize {
        self.layers.iter().map(|l| l.n_total).sum()
    }

    fn shared_params(&self) -> usize {
        self.front.iter().map(DenseLayer::param_count).sum::<usize>() + self.head.param_count()
    }

    fn shared_macs(&self) -> u64 {
        self.front.iter().map(DenseLayer::forward_macs).sum::<u64>() + self.head.forward_macs()
    }
}

impl Parameterized for ModularModel {
    fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.front.iter().enumerate() {
            l.params(ParamGroup::Front, &format!("{i}."), &mut out);
        }
        for layer in &self.layers {
            for m in &layer.modules {
                if let Some(b) = &m.body {
                    b.hidden.params(m.group(), "fc1.", &mut out);
                    b.out.params(m.group(), "fc2.", &mut out);
                }
            }
        }
        self.head.params(ParamGroup::Head, "", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.front.iter_mut().enumerate() {
            l.params_mut(ParamGroup::Front, &format!("{i}."), &mut out);
        }
        for layer in &mut self.layers {
            for m in &mut layer.modules {
                let group = m.group();
                if let Some(b) = &mut m.body {
                    b.hidden.params_mut(group, "fc1.", &mut out);
                    b.out.params_mut(group, "fc2.", &mut out);
                }
            }
        }
        self.head.params_mut(ParamGroup::Head, "", &mut out);
        out
    }
}

/// Builds a freshly initialized modular model and a matching selector.
pub fn modularize<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<ModelPair> {
    if shape.module_layers.is_empty() {
        return Err(Error::Config("a modular model needs at least one module layer".into()));
    }
    if shape.shrink_fractions.is_empty()
        || shape
            .shrink_fractions
            .iter()
            .any(|&f| !(f > 0.0 && f <= 1.0))
    {
        return Err(Error::Config("shrink fractions must lie in (0, 1]".into()));
    }
    let mut front = Vec::new();
    let mut prev = shape.input_dim;
    for &d in &shape.front {
        front.push(DenseLayer::glorot(prev, d, Activation::Relu, rng));
        prev = d;
    }
    let mut layers = Vec::new();
    for (l, ls) in shape.module_layers.iter().enumerate() {
        if ls.n_modules < 2 {
            return Err(Error::Config(format!(
                "module layer {l} needs at least 2 modules, got {}",
                ls.n_modules
            )));
        }
        if shape.include_residual && prev != ls.out_dim {
            return Err(Error::Config(format!(
                "residual module requested in layer {l} but in-dim {prev} != out-dim {}",
                ls.out_dim
            )));
        }
        let mut modules = Vec::with_capacity(ls.n_modules);
        let n_shrunk = ls.n_modules - usize::from(shape.include_residual);
        for i in 0..n_shrunk {
            let frac = shape.shrink_fractions[i % shape.shrink_fractions.len()];
            let hidden = ((ls.hidden as f64 * frac).round() as usize).max(1);
            modules.push(Module {
                layer: l,
                index: i,
                kind: ModuleKind::Shrunk { width_fraction: frac },
                body: Some(ModuleBody {
                    hidden: DenseLayer::glorot(prev, hidden, Activation::Relu, rng),
                    out: DenseLayer::glorot(hidden, ls.out_dim, Activation::Identity, rng),
                }),
            });
        }
        if shape.include_residual {
            modules.push(Module {
                layer: l,
                index: n_shrunk,
                kind: ModuleKind::Residual,
                body: None,
            });
        }
        layers.push(ModuleLayer {
            index: l,
            in_dim: prev,
            out_dim: ls.out_dim,
            block_hidden: ls.hidden,
            n_total: ls.n_modules,
            modules,
        });
        prev = ls.out_dim;
    }
    let head = DenseLayer::glorot(prev, shape.num_classes, Activation::Identity, rng);
    let model = ModularModel {
        input_dim: shape.input_dim,
        front,
        layers,
        head,
    };
    let selector = UnifiedSelector::new(
        shape.input_dim,
        &shape.selector_embed,
        &model.layer_widths(),
        shape.k,
        shape.noise_scale,
        rng,
    )?;
    ModelPair::new(model, selector)
}

/// Per-layer trace of a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `[B, N]` gate distributions (noisy in training mode).
    pub gates: Tensor,
    /// Modules that contributed per sample (top-k over retained modules).
    pub active: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
}

impl RoutingTrace {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.active.len())
    }

    pub fn decision(&self, row: usize) -> RoutingDecision {
        RoutingDecision {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDecision {
                    gates: l.gates.row(row).to_vec(),
                    active: l.active[row].clone(),
                })
                .collect(),
        }
    }

    pub fn decisions(&self) -> Vec<RoutingDecision> {
        (0..self.batch_size()).map(|r| self.decision(r)).collect()
    }
}

/// Tape handles from a recorded forward pass.
#[derive(Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// Gate distribution node per layer (pre top-k, post softmax).
    pub gates: Vec<Var>,
    /// Noise-free selector logits per layer.
    pub selector_logits: Vec<Var>,
    /// Top-k entry thresholds per layer (see [`crate::selector::topk_thresholds`]).
    pub thresholds: Vec<Tensor>,
    pub trace: RoutingTrace,
}

/// A modular model with its unified selector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub model: ModularModel,
    pub selector: UnifiedSelector,
}

impl ModelPair {
    pub fn new(model: ModularModel, selector: UnifiedSelector) -> Result<Self> {
        validate_stack(&model.front)?;
        if model.layers.is_empty() {
            return Err(Error::Config("model has no module layer".into()));
        }
        let mut prev = model.front.last().map_or(model.input_dim, DenseLayer::out_dim);
        for l in &model.layers {
            if l.in_dim != prev {
                return Err(Error::shape(format!("module layer {}", l.index), &[prev], &[l.in_dim]));
            }
            if l.n_total < 2 {
                return Err(Error::Config(format!("module layer {} has N < 2", l.index)));
            }
            if l.is_complete() && l.modules.iter().all(|m| m.body.is_none()) {
                return Err(Error::Config(format!("module layer {} has only residual modules", l.index)));
            }
            prev = l.out_dim;
        }
        if model.head.in_dim() != prev {
            return Err(Error::shape("head", &[prev], &[model.head.in_dim()]));
        }
        if selector.layer_widths() != model.layer_widths() {
            return Err(Error::Config(format!(
                "selector widths {:?} do not match model widths {:?}",
                selector.layer_widths(),
                model.layer_widths()
            )));
        }
        if selector.input_dim().is_some_and(|d| d != model.input_dim) {
            return Err(Error::Config("selector input dim differs from model input dim".into()));
        }
        Ok(Self { model, selector })
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.model.layer_widths()
    }

    /// Records a forward pass on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, x: &Tensor, routing: &mut Routing<'_>) -> Result<TapeForward> {
        let x = x.clone().as_matrix();
        if x.cols() != self.model.input_dim {
            return Err(Error::shape("model input", &[self.model.input_dim], &[x.cols()]));
        }
        let batch = x.rows();
        let xv = tape.leaf(x);
        let routes = self.selector.route_tape(tape, xv, routing)?;
        let mut h = xv;
        for (i, l) in self.model.front.iter().enumerate() {
            h = l.forward_tape(tape, h, ParamGroup::Front, &format!("{i}."))?;
        }
        let k = self.selector.k;
        let mut layers = Vec::with_capacity(self.model.layers.len());
        let mut gate_vars = Vec::with_capacity(self.model.layers.len());
        let mut selector_logits = Vec::with_capacity(self.model.layers.len());
        let mut thresholds = Vec::with_capacity(self.model.layers.len());
        for (layer, route) in self.model.layers.iter().zip(routes) {
            selector_logits.push(route.logits);
            thresholds.push(route.thresholds);
            let n = layer.n_total;
            let (weights, mask, active) = if layer.is_complete() {
                (route.gates, route.mask, route.active)
            } else {
                let gv = tape.value(route.gates);
                let retained = layer.retained();
                let kk = k.min(retained.len());
                let mut kept = vec![false; batch * n];
                let mut active = Vec::with_capacity(batch);
                for r in 0..batch {
                    let row = gv.row(r);
                    let scores: Vec<f64> = retained.iter().map(|&i| row[i]).collect();
                    let sel: Vec<usize> = top_k(&scores, kk).into_iter().map(|p| retained[p]).collect();
                    for &i in &sel {
                        kept[r * n + i] = true;
                    }
                    active.push(sel);
                }
                let w = tape.mass_renorm(route.gates, route.mask, kept.clone())?;
                (w, kept, active)
            };
            h = layer.forward_tape(tape, h, weights, mask)?;
            layers.push(LayerTrace {
                gates: tape.value(route.gates).clone(),
                active,
            });
            gate_vars.push(route.gates);
        }
        let logits = self.model.head.forward_tape(tape, h, ParamGroup::Head, "")?;
        Ok(TapeForward {
            logits,
            gates: gate_vars,
            selector_logits,
            thresholds,
            trace: RoutingTrace { layers },
        })
    }

    /// Logits `[B, C]` and routing trace for `x`.
    pub fn forward(&self, x: &Tensor, mut routing: Routing<'_>) -> Result<(Tensor, RoutingTrace)> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, x, &mut routing)?;
        Ok((tape.value(out.logits).clone(), out.trace))
    }

    /// Class predictions in eval mode, evaluated in chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let x = x.clone().as_matrix();
        let mut preds = Vec::with_capacity(x.rows());
        let chunk = 256;
        let mut start = 0;
        while start < x.rows() {
            let end = (start + chunk).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let (logits, _) = self.forward(&x.select_rows(&idx), Routing::Eval)?;
            preds.extend((0..logits.rows()).map(|r| crate::nn::argmax(logits.row(r))));
            start = end;
        }
        Ok(preds)
    }

    /// Fraction of rows of `x` classified as `labels`.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict(x)?;
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Sub-model keeping only the modules listed in `spec`.
    pub fn materialize(&self, spec: &SubModelSpec) -> Result<ModelPair> {
        spec.validate(&self.layer_widths())?;
        let mut model = self.model.clone();
        for (layer, keep) in model.layers.iter_mut().zip(&spec.layers) {
            for &i in keep {
                if layer.module(i).is_none() {
                    return Err(Error::Spec(format!(
                        "module {i} of layer {} is not present in this model",
                        layer.index
                    )));
                }
            }
            layer.modules.retain(|m| keep.binary_search(&m.index).is_ok());
        }
        Ok(ModelPair {
            model,
            selector: self.selector.clone(),
        })
    }

    /// The spec describing which modules this (sub-)model holds.
    pub fn spec(&self) -> SubModelSpec {
        SubModelSpec::new(self.model.layers.iter().map(ModuleLayer::retained).collect())
    }

    /// Cost of the parts every sub-model carries: front blocks, head and selector.
    pub fn shared_cost(&self) -> ResourceCost {
        let sel_params = self.selector.param_count();
        let sel_macs: u64 = self
            .selector
            .embed
            .iter()
            .chain(&self.selector.heads)
            .map(DenseLayer::forward_macs)
            .sum();
        ResourceCost::for_params(self.model.shared_params() + sel_params, self.model.shared_macs() + sel_macs)
    }

    pub fn module_cost(&self, layer: usize, index: usize) -> Option<ResourceCost> {
        let l = self.model.layers.get(layer)?;
        l.module(index).map(|m| m.cost(l.in_dim))
    }

    /// Costs of every module, per layer, indexed by module index.
    pub fn module_costs(&self) -> Vec<Vec<ResourceCost>> {
        self.model
            .layers
            .iter()
            .map(|l| {
                (0..l.n_total)
                    .map(|i| l.module(i).map_or_else(ResourceCost::default, |m| m.cost(l.in_dim)))
                    .collect()
            })
            .collect()
    }

    /// Whole sub-model cost: shared parts plus every module in `spec`.
    pub fn cost_of(&self, spec: &SubModelSpec) -> Result<ResourceCost> {
        spec.validate(&self.layer_widths())?;
        let mut total = self.shared_cost();
        for (l, set) in spec.layers.iter().enumerate() {
            for &i in set {
                total += self
                    .module_cost(l, i)
                    .ok_or_else(|| Error::Spec(format!("module {i} of layer {l} missing")))?;
            }
        }
        Ok(total)
    }

    /// Cost of this model as held (shared parts plus retained modules).
    pub fn total_cost(&self) -> ResourceCost {
        self.shared_cost() + self.model.layers.iter().map(ModuleLayer::cost).sum()
    }
}

impl Parameterized for ModelPair {
    fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut p = self.model.params();
        p.extend(self.selector.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        let mut p = self.model.params_mut();
        p.extend(self.selector.params_mut());
        p
    }
}

#[cfg(test)]
mod tests;
