//! Builds the proxy, edge, shift-pool and evaluation sets of a scenario.

use rand::seq::SliceRandom;

use super::config::{DatasetConfig, ScenarioConfig};
use crate::data::Dataset;
use crate::env::{ingest_csv, Standardizer, SyntheticTask};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Cloud-side data for offline training.
    pub proxy: Dataset,
    /// Source of the devices' initial partitions.
    pub edge: Dataset,
    /// Source of replacement samples at shifts.
    pub shift_pool: Dataset,
    /// Global evaluation set before any drift.
    pub test: Dataset,
    /// Generator of the synthetic task, when the dataset is synthetic.
    pub task: Option<SyntheticTask>,
    pub standardizer: Option<Standardizer>,
    /// Feature columns with zero variance in the training split.
    pub constant_columns: Vec<usize>,
    seed: u64,
}

impl PreparedData {
    /// Whether shifts move the class distributions.
    pub fn drifts(&self) -> bool {
        self.task.as_ref().is_some_and(|t| t.config.drift_step > 0.0)
    }

    /// Global evaluation set after `shifts` drift steps.
    pub fn eval_set(&self, shifts: usize) -> Dataset {
        match &self.task {
            Some(task) if shifts > 0 && self.drifts() => {
                let mut rng = stream(self.seed, "test", shifts as u64, 0);
                task.sample_balanced(task.config.test_per_class, shifts as f64, &mut rng)
            }
            _ => self.test.clone(),
        }
    }
}

/// Splits row indices per group into consecutive shares given by `fractions`
/// (the last share takes the remainder). Each group is shuffled first.
fn stratified_split(data: &Dataset, fractions: &[f64], seed: u64, tag: &str) -> Vec<Vec<usize>> {
    let groups = data.groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut by_group = vec![Vec::new(); groups];
    for (r, &g) in data.groups.iter().enumerate() {
        by_group[g].push(r);
    }
    let mut out = vec![Vec::new(); fractions.len() + 1];
    for (g, rows) in by_group.iter_mut().enumerate() {
        rows.shuffle(&mut stream(seed, tag, g as u64, 0));
        let mut start = 0;
        for (part, &f) in fractions.iter().enumerate() {
            let take = ((f * rows.len() as f64).round() as usize).min(rows.len() - start);
            out[part].extend_from_slice(&rows[start..start + take]);
            start += take;
        }
        out[fractions.len()].extend_from_slice(&rows[start..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    out
}

pub fn prepare_data(cfg: &ScenarioConfig) -> Result<PreparedData> {
    let seed = cfg.seed;
    let (source, test, task, standardizer, constant_columns) = match &cfg.dataset {
        DatasetConfig::Synthetic(s) => {
            let task = SyntheticTask::generate(s, &mut stream(seed, "task", 0, 0))?;
            let source = task.sample_balanced(s.samples_per_class, 0.0, &mut stream(seed, "source", 0, 0));
            let test = task.sample_balanced(s.test_per_class, 0.0, &mut stream(seed, "test", 0, 0));
            (source, test, Some(task), None, Vec::new())
        }
        DatasetConfig::Csv(c) => {
            let all = ingest_csv(&c.path, &c.schema)?.dataset;
            if all.dim() != cfg.model.input_dim || all.num_classes != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "model expects {} inputs and {} classes, {} has {} and {}",
                    cfg.model.input_dim,
                    cfg.model.num_classes,
                    c.path.display(),
                    all.dim(),
                    all.num_classes
                )));
            }
            let parts = stratified_split(&all, &[c.test_fraction], seed, "split_test");
            let mut test = all.subset(&parts[0]);
            let mut train = all.subset(&parts[1]);
            let (st, constant) = Standardizer::fit(&train.x);
            st.apply(&mut train.x)?;
            st.apply(&mut test.x)?;
            (train, test, None, Some(st), constant)
        }
    };
    let edge_share = 1.0 - cfg.proxy_fraction;
    let parts = stratified_split(
        &source,
        &[cfg.proxy_fraction, edge_share * (1.0 - cfg.shift_pool_fraction)],
        seed,
        "split",
    );
    let proxy = source.subset(&parts[0]);
    if proxy.is_empty() {
        return Err(Error::EmptyDataset("the proxy split is empty".into()));
    }
    Ok(PreparedData {
        proxy,
        edge: source.subset(&parts[1]),
        shift_pool: source.subset(&parts[2]),
        test,
        task,
        standardizer,
        constant_columns,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SyntheticConfig;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            dataset: DatasetConfig::Synthetic(SyntheticConfig {
                samples_per_class: 100,
                test_per_class: 20,
                ..SyntheticConfig::default()
            }),
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn splits_partition_the_source() {
        let d = prepare_data(&small()).unwrap();
        assert_eq!(d.proxy.len() + d.edge.len() + d.shift_pool.len(), 800);
        assert_eq!(d.proxy.len(), 240);
        assert_eq!(d.edge.len(), 280);
        assert_eq!(d.test.len(), 160);
        for c in 0..8 {
            assert_eq!(d.proxy.labels.iter().filter(|&&l| l == c).count(), 30);
        }
    }

    #[test]
    fn preparation_is_deterministic() {
        let a = prepare_data(&small()).unwrap();
        let b = prepare_data(&small()).unwrap();
        assert_eq!(a.proxy, b.proxy);
        assert_eq!(a.shift_pool, b.shift_pool);
        assert_eq!(a.eval_set(3), a.test, "no drift configured");
    }

    #[test]
    fn drifted_eval_sets_move() {
        let mut cfg = small();
        if let DatasetConfig::Synthetic(s) = &mut cfg.dataset {
            s.drift_step = 1.0;
        }
        let d = prepare_data(&cfg).unwrap();
        assert_eq!(d.eval_set(0), d.test);
        let e = d.eval_set(2);
        assert_eq!(e.labels, d.test.labels);
        assert_ne!(e.x, d.test.x);
        assert_eq!(d.eval_set(2), e);
    }
}
