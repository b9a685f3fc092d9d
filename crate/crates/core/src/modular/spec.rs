use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer sets of retained module indices defining a sub-model.
///
/// Serialized compactly as `{"device":3,"round":12,"layers":[[0,4],[2,7,9]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u64>,
    pub layers: Vec<Vec<usize>>,
}

impl SubModelSpec {
    pub fn new(mut layers: Vec<Vec<usize>>) -> Self {
        for l in &mut layers {
            l.sort_unstable();
            l.dedup();
        }
        Self {
            device: None,
            round: None,
            layers,
        }
    }

    /// Every module of every layer.
    pub fn full(widths: &[usize]) -> Self {
        Self::new(widths.iter().map(|&n| (0..n).collect()).collect())
    }

    pub fn with_provenance(mut self, device: usize, round: u64) -> Self {
        self.device = Some(device);
        self.round = Some(round);
        self
    }

    pub fn contains(&self, layer: usize, index: usize) -> bool {
        self.layers.get(layer).is_some_and(|l| l.binary_search(&index).is_ok())
    }

    pub fn module_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Checks the spec against a model with the given module-layer widths.
    pub fn validate(&self, widths: &[usize]) -> Result<()> {
        if self.layers.len() != widths.len() {
            return Err(Error::Spec(format!(
                "spec has {} layers, model has {}",
                self.layers.len(),
                widths.len()
            )));
        }
        for (l, (set, &n)) in self.layers.iter().zip(widths).enumerate() {
            if set.is_empty() {
                return Err(Error::Spec(format!("layer {l} retains no module")));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Spec(format!("layer {l} indices must be sorted and unique")));
            }
            if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                return Err(Error::Spec(format!("layer {l} index {bad} >= {n}")));
            }
        }
        Ok(())
    }
}

/// Routing of one sample through one module layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    /// Full gate distribution over the layer's modules.
    pub gates: Vec<f64>,
    /// Activated module indices (ascending).
    pub active: Vec<usize>,
}

/// Per-layer routing of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub layers: Vec<LayerDecision>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_specs() {
        let widths = [3, 4];
        assert!(SubModelSpec::full(&widths).validate(&widths).is_ok());
        assert!(SubModelSpec::new(vec![vec![0], vec![]]).validate(&widths).is_err());
        assert!(SubModelSpec::new(vec![vec![0], vec![4]]).validate(&widths).is_err());
        assert!(SubModelSpec::new(vec![vec![0]]).validate(&widths).is_err());
    }

    #[test]
    fn json_is_compact_and_sorted() {
        let spec = SubModelSpec::new(vec![vec![5, 0, 5], vec![2]]).with_provenance(3, 12);
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(s, r#"{"device":3,"round":12,"layers":[[0,5],[2]]}"#);
        let back: SubModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}
