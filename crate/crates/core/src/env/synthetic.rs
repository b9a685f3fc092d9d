//! Gaussian-mixture classification task with optional class drift.
//!
//! Each class owns several isotropic Gaussian clusters. Classes come in pairs
//! sharing a nearby group centre, so some sub-tasks are more similar than
//! others. Drift translates every cluster of class `c` along a fixed unit
//! direction `u_c` by `drift_step` per adaptation step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    /// Within-cluster standard deviation.
    pub sigma: f64,
    /// Minimum distance between any two cluster centres, in units of `sigma`.
    pub margin: f64,
    /// Spread of group centres (classes `2j` and `2j+1` share group `j`).
    pub group_spread: f64,
    /// Spread of cluster centres around their group centre.
    pub cluster_spread: f64,
    /// Translation of a class per adaptation step, in units of `sigma`.
    pub drift_step: f64,
    /// Constant added to every feature (models uncentred raw inputs).
    pub offset: f64,
    /// Total samples generated per class for the source pool.
    pub samples_per_class: usize,
    /// Samples per class in the global evaluation set.
    pub test_per_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            clusters_per_class: 2,
            dim: 32,
            sigma: 1.0,
            margin: 4.0,
            group_spread: 2.0,
            cluster_spread: 1.0,
            drift_step: 0.0,
            offset: 0.0,
            samples_per_class: 1000,
            test_per_class: 250,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.clusters_per_class == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic task needs ≥2 classes, ≥1 cluster and dim ≥1".into()));
        }
        if !(self.sigma > 0.0) || !(self.margin >= 0.0) || !(self.drift_step >= 0.0) {
            return Err(Error::Config("synthetic sigma must be positive, margin and drift non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    /// `centers[c][j]` is the centre of cluster `j` of class `c`.
    pub centers: Vec<Vec<Vec<f64>>>,
    /// Unit drift direction per class.
    pub drift_dirs: Vec<Vec<f64>>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl SyntheticTask {
    /// Draws cluster centres, re-drawing any that violate the margin.
    pub fn generate<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let min_dist = config.margin * config.sigma;
        let groups: Vec<Vec<f64>> = (0..config.num_classes.div_ceil(2))
            .map(|_| gaussian(rng, d, config.group_spread))
            .collect();
        let mut placed: Vec<Vec<f64>> = Vec::new();
        let mut centers = Vec::with_capacity(config.num_classes);
        for c in 0..config.num_classes {
            let mut class = Vec::with_capacity(config.clusters_per_class);
            for _ in 0..config.clusters_per_class {
                let mut tries = 0;
                let center = loop {
                    let off = gaussian(rng, d, config.cluster_spread);
                    let cand: Vec<f64> = groups[c / 2]
                        .iter()
                        .zip(&off)
                        .map(|(g, o)| config.offset + g + o)
                        .collect();
                    if placed.iter().all(|p| dist(p, &cand) >= min_dist) {
                        break cand;
                    }
                    tries += 1;
                    if tries > 10_000 {
                        return Err(Error::Config(format!(
                            "cannot place {} clusters {min_dist} apart in {d} dimensions",
                            config.num_classes * config.clusters_per_class
                        )));
                    }
                };
                placed.push(center.clone());
                class.push(center);
            }
            centers.push(class);
        }
        let drift_dirs = (0..config.num_classes)
            .map(|_| {
                let v = gaussian(rng, d, 1.0);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            centers,
            drift_dirs,
        })
    }

    /// Smallest distance between two cluster centres.
    pub fn min_center_distance(&self) -> f64 {
        let all: Vec<&Vec<f64>> = self.centers.iter().flatten().collect();
        let mut best = f64::INFINITY;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                best = best.min(dist(all[i], all[j]));
            }
        }
        best
    }

    /// Global cluster id of cluster `j` of class `c`.
    pub fn cluster_id(&self, class: usize, j: usize) -> usize {
        class * self.config.clusters_per_class + j
    }

    /// `n` samples of `class` after `drift` adaptation steps; clusters are
    /// chosen uniformly per sample.
    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, n: usize, drift: f64, rng: &mut R) -> Dataset {
        self.sample_with(class, None, n, drift, rng)
    }

    /// `n` samples of the cluster with global id `group` (see [`Self::cluster_id`]).
    pub fn sample_group<R: Rng + ?Sized>(&self, group: usize, n: usize, drift: f64, rng: &mut R) -> Dataset {
        let cpc = self.config.clusters_per_class;
        self.sample_with(group / cpc, Some(group % cpc), n, drift, rng)
    }

    fn sample_with<R: Rng + ?Sized>(&self, class: usize, cluster: Option<usize>, n: usize, drift: f64, rng: &mut R) -> Dataset {
        let cfg = &self.config;
        let shift = drift * cfg.drift_step * cfg.sigma;
        let mut data = Vec::with_capacity(n * cfg.dim);
        let mut groups = Vec::with_capacity(n);
        for _ in 0..n {
            let j = cluster.unwrap_or_else(|| rng.random_range(0..cfg.clusters_per_class));
            let center = &self.centers[class][j];
            for (k, c) in center.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + shift * self.drift_dirs[class][k] + cfg.sigma * z);
            }
            groups.push(self.cluster_id(class, j));
        }
        Dataset {
            x: Tensor::new(vec![n, cfg.dim], data).expect("sample shape"),
            labels: vec![class; n],
            groups,
            num_classes: cfg.num_classes,
        }
    }

    /// `per_class` samples of every class, classes in ascending order.
    pub fn sample_balanced<R: Rng + ?Sized>(&self, per_class: usize, drift: f64, rng: &mut R) -> Dataset {
        let mut out = Dataset::empty(self.config.dim, self.config.num_classes);
        for c in 0..self.config.num_classes {
            out.extend(&self.sample_class(c, per_class, drift, rng)).expect("same dim");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centres_respect_margin() {
        for seed in 0..5 {
            let task = SyntheticTask::generate(&SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(task.min_center_distance() >= 4.0);
            assert_eq!(task.centers.len(), 8);
            assert!(task.centers.iter().all(|c| c.len() == 2));
        }
    }

    #[test]
    fn impossible_margin_is_a_config_error() {
        let cfg = SyntheticConfig {
            dim: 1,
            margin: 1000.0,
            ..SyntheticConfig::default()
        };
        assert!(SyntheticTask::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn samples_concentrate_on_shifted_centres() {
        let cfg = SyntheticConfig {
            clusters_per_class: 1,
            drift_step: 0.5,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let task = SyntheticTask::generate(&cfg, &mut rng).unwrap();
        let d = task.sample_class(2, 4000, 4.0, &mut rng);
        for k in 0..cfg.dim {
            let mean: f64 = (0..d.len()).map(|r| d.x.row(r)[k]).sum::<f64>() / d.len() as f64;
            let want = task.centers[2][0][k] + 2.0 * task.drift_dirs[2][k];
            assert!((mean - want).abs() < 0.1, "coord {k}: {mean} vs {want}");
        }
        assert!(d.labels.iter().all(|&y| y == 2));
        assert!(d.groups.iter().all(|&g| g == 2));
        let g = task.sample_group(5, 10, 0.0, &mut rng);
        assert!(g.groups.iter().all(|&x| x == 5) && g.labels.iter().all(|&y| y == 5));
    }
}
