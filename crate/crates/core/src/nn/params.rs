//! Parameter naming and gradient containers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Which aggregation unit a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Ordinary blocks in front of the first module layer.
    Front,
    /// Module `index` of module layer `layer`.
    Module { layer: usize, index: usize },
    /// Classifier head.
    Head,
    /// The unified module selector.
    Selector,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Front => write!(f, "front"),
            ParamGroup::Module { layer, index } => write!(f, "layer{layer}/m{index}"),
            ParamGroup::Head => write!(f, "head"),
            ParamGroup::Selector => write!(f, "selector"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub name: String,
}

impl ParamKey {
    pub fn new(group: ParamGroup, name: impl Into<String>) -> Self {
        Self {
            group,
            name: name.into(),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group, self.name)
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad parameter key `{s}`"));
        let (head, name) = s.rsplit_once('/').ok_or_else(bad)?;
        let group = match head {
            "front" => ParamGroup::Front,
            "head" => ParamGroup::Head,
            "selector" => ParamGroup::Selector,
            other => {
                let (l, m) = other.split_once('/').ok_or_else(bad)?;
                let layer = l.strip_prefix("layer").ok_or_else(bad)?;
                let index = m.strip_prefix('m').ok_or_else(bad)?;
                ParamGroup::Module {
                    layer: layer.parse().map_err(|_| bad())?,
                    index: index.parse().map_err(|_| bad())?,
                }
            }
        };
        Ok(ParamKey::new(group, name))
    }
}

/// Gradients keyed by parameter, in deterministic order.
pub type Gradients = BTreeMap<ParamKey, Tensor>;

/// Anything owning named trainable tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<(ParamKey, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}
