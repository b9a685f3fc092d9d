//! Sub-task definitions, the sub-task mapping matrix `H` and the target
//! mapping `P = H ⊙ M`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, Tensor};
use crate::selector::UnifiedSelector;

/// Dense row-major `rows × cols` matrix, one per module layer.
pub type Matrix = Vec<Vec<f64>>;

/// How samples are grouped into sub-tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskRule {
    /// One sub-task per listed label set; every label must appear exactly once.
    Labels(Vec<Vec<usize>>),
    /// One sub-task per class.
    PerClass,
    /// One sub-task per sample group (generating cluster or user).
    Groups,
}

impl Default for SubTaskRule {
    fn default() -> Self {
        SubTaskRule::PerClass
    }
}

impl SubTaskRule {
    /// Sub-task id per sample and the number of sub-tasks.
    pub fn assign(&self, data: &Dataset) -> Result<(Vec<usize>, usize)> {
        match self {
            SubTaskRule::PerClass => Ok((data.labels.clone(), data.num_classes)),
            SubTaskRule::Groups => {
                let t = data.groups.iter().max().map_or(0, |g| g + 1);
                Ok((data.groups.clone(), t))
            }
            SubTaskRule::Labels(sets) => {
                let mut of_label = vec![usize::MAX; data.num_classes];
                for (t, set) in sets.iter().enumerate() {
                    for &y in set {
                        if y >= data.num_classes {
                            return Err(Error::Config(format!("sub-task {t} names label {y} out of range")));
                        }
                        if of_label[y] != usize::MAX {
                            return Err(Error::Config(format!("label {y} belongs to two sub-tasks")));
                        }
                        of_label[y] = t;
                    }
                }
                if let Some(y) = of_label.iter().position(|&t| t == usize::MAX) {
                    return Err(Error::Config(format!("label {y} belongs to no sub-task")));
                }
                Ok((data.labels.iter().map(|&y| of_label[y]).collect(), sets.len()))
            }
        }
    }
}

/// Per-layer `T × N` matrix of row-normalized mean gate mass.
pub fn build_task_map(selector: &UnifiedSelector, x: &Tensor, subtasks: &[usize], t: usize) -> Result<Vec<Matrix>> {
    let gates = selector.gate_probs(x)?;
    task_map_from_gates(&gates, subtasks, t)
}

/// [`build_task_map`] from precomputed `[B, N]` gate matrices.
pub fn task_map_from_gates(gates: &[Tensor], subtasks: &[usize], t: usize) -> Result<Vec<Matrix>> {
    if t < 2 {
        return Err(Error::Config(format!("need at least 2 sub-tasks, got {t}")));
    }
    let mut counts = vec![0usize; t];
    for &s in subtasks {
        if s >= t {
            return Err(Error::Index {
                what: "sub-task",
                index: s,
                bound: t,
            });
        }
        counts[s] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyDataset(format!("sub-task {empty} has no samples")));
    }
    gates
        .iter()
        .map(|g| {
            if g.rows() != subtasks.len() {
                return Err(Error::shape("task map gates", &[subtasks.len()], &[g.rows()]));
            }
            let n = g.cols();
            let mut h = vec![vec![0.0; n]; t];
            for (r, &s) in subtasks.iter().enumerate() {
                for (acc, v) in h[s].iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            for row in &mut h {
                let total: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok(h)
        })
        .collect()
}

/// `P = H ⊙ M` with rows renormalized; an all-zero row becomes one-hot at
/// that row's largest `H` entry. Returns `P` and the repaired rows.
pub fn target_mapping(h: &Matrix, mask: &[Vec<bool>]) -> (Matrix, Vec<usize>) {
    let mut repaired = Vec::new();
    let p = h
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(t, (hr, mr))| {
            let mut row: Vec<f64> = hr.iter().zip(mr).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for v in &mut row {
                    *v /= total;
                }
            } else {
                repaired.push(t);
                row = vec![0.0; hr.len()];
                row[argmax(hr)] = 1.0;
            }
            row
        })
        .collect();
    (p, repaired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_routing_gives_one_hot_rows() {
        let gates = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = task_map_from_gates(&[gates], &[0, 0, 1], 2).unwrap();
        assert_eq!(h[0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn uniform_gates_give_uniform_rows() {
        let gates = Tensor::new(vec![4, 4], vec![0.25; 16]).unwrap();
        let h = task_map_from_gates(&[gates], &[0, 1, 1, 2], 3).unwrap();
        assert!(h[0].iter().flatten().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn matches_group_by_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, n, t) = (50, 6, 4);
        let mut data = Vec::new();
        for _ in 0..b {
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            data.extend(crate::nn::softmax(&logits));
        }
        let subtasks: Vec<usize> = (0..b).map(|i| i % t).collect();
        let gates = Tensor::new(vec![b, n], data).unwrap();
        let h = task_map_from_gates(&[gates.clone()], &subtasks, t).unwrap();
        for s in 0..t {
            let rows: Vec<usize> = (0..b).filter(|&r| subtasks[r] == s).collect();
            for c in 0..n {
                let mean = rows.iter().map(|&r| gates.row(r)[c]).sum::<f64>() / rows.len() as f64;
                assert!((h[0][s][c] - mean).abs() < 1e-12);
            }
            assert!((h[0][s].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_subtask_is_an_error() {
        let gates = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        assert!(matches!(
            task_map_from_gates(&[gates], &[0, 0], 2),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn target_mapping_masks_and_repairs() {
        let h = vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]];
        let mask = vec![vec![true, true, false], vec![true, false, false]];
        let (p, rep) = target_mapping(&h, &mask);
        assert!((p[0][0] - 0.625).abs() < 1e-15 && (p[0][1] - 0.375).abs() < 1e-15);
        assert_eq!(p[1], vec![1.0, 0.0, 0.0]);
        assert!(rep.is_empty());
        let (p, rep) = target_mapping(&h, &[vec![false; 3], vec![false; 3]]);
        assert_eq!(rep, vec![0, 1]);
        assert_eq!(p[1], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn label_rule_validation() {
        let data = Dataset::new(Tensor::zeros(&[3, 1]), vec![0, 1, 2], vec![0, 0, 0], 3).unwrap();
        let (ids, t) = SubTaskRule::Labels(vec![vec![0, 2], vec![1]]).assign(&data).unwrap();
        assert_eq!((ids, t), (vec![0, 1, 0], 2));
        assert!(SubTaskRule::Labels(vec![vec![0], vec![1]]).assign(&data).is_err());
        assert!(SubTaskRule::Labels(vec![vec![0, 1], vec![1, 2]]).assign(&data).is_err());
    }
}
