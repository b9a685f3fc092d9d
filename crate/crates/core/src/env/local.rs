//! On-device training of a downloaded sub-model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modular::ModelPair;
use crate::nn::{sgd_step, SgdConfig, Tape};
use crate::selector::Routing;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            epochs: 3,
            learning_rate: sgd.learning_rate,
            batch_size: sgd.batch_size,
        }
    }
}

impl LocalConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    /// Mean cross-entropy over the last epoch; `None` without training.
    pub last_loss: Option<f64>,
    pub steps: usize,
}

/// Mini-batch SGD on cross-entropy with noise-free routing.
///
/// Returns a divergence error, leaving `model` partially trained, if the
/// loss stops being finite.
pub fn local_train<R: Rng + ?Sized>(model: &mut ModelPair, data: &Dataset, cfg: &LocalConfig, rng: &mut R) -> Result<LocalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("local training needs data".into()));
    }
    let sgd = cfg.sgd();
    sgd.validate()?;
    let pre_accuracy = model.accuracy(&data.x, &data.labels)?;
    let mut last_loss = None;
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(sgd.batch_size) {
            let x = data.x.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let out = model.forward_tape(&mut tape, &x, &mut Routing::Eval)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    stage: "local".into(),
                    detail: format!("epoch {epoch}: loss is not finite"),
                });
            }
            let grads = tape.backward(loss)?;
            sgd_step(model, &grads, &sgd)?;
            sum += lv;
            batches += 1;
            steps += 1;
        }
        last_loss = Some(sum / batches as f64);
    }
    Ok(LocalReport {
        pre_accuracy,
        post_accuracy: model.accuracy(&data.x, &data.labels)?,
        last_loss,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::synthetic::{SyntheticConfig, SyntheticTask};
    use crate::modular::{modularize, ModelShape, SubModelSpec};
    use crate::nn::Parameterized;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ModelPair, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = SyntheticTask::generate(&SyntheticConfig::default(), &mut rng).unwrap();
        let mut data = task.sample_class(1, 60, 0.0, &mut rng);
        data.extend(&task.sample_class(6, 60, 0.0, &mut rng)).unwrap();
        let pair = modularize(&ModelShape::default(), &mut rng).unwrap();
        let sub = pair.materialize(&SubModelSpec::new(vec![vec![0, 3, 15], vec![2, 5]])).unwrap();
        (sub, data)
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = LocalConfig::default();
        assert_eq!((c.epochs, c.learning_rate, c.batch_size), (3, 0.001, 16));
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (mut sub, data) = setup(1);
        let before = sub.clone();
        let cfg = LocalConfig {
            epochs: 0,
            ..LocalConfig::default()
        };
        let r = local_train(&mut sub, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.last_loss, None);
        assert_eq!(sub.params(), before.params());
    }

    #[test]
    fn training_does_not_lower_local_accuracy() {
        for seed in 0..3 {
            let (mut sub, data) = setup(seed);
            let cfg = LocalConfig {
                epochs: 3,
                learning_rate: 0.05,
                batch_size: 16,
            };
            let r = local_train(&mut sub, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(r.post_accuracy >= r.pre_accuracy, "{r:?}");
            assert_eq!(r.steps, 3 * 120usize.div_ceil(16));
        }
    }

    #[test]
    fn local_training_is_deterministic() {
        let run = || {
            let (mut sub, data) = setup(4);
            local_train(&mut sub, &data, &LocalConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            sub
        };
        assert_eq!(run().params(), run().params());
    }
}
