//! Offline cloud stage: modularize, pretrain, map sub-tasks to modules and
//! fine-tune toward the assignment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::artifacts::{self as art, bool_rows, matrix_file, write_jsonl, write_matrix};
use super::config::ScenarioConfig;
use super::data::PreparedData;
use crate::cloud::{
    build_task_map, default_kappa1, eval_loads, finetune_enhance, pretrain, solve_assignment, solve_assignment_weighted,
    target_mapping, Assignment, CapMode, EpochLog, FinetuneReport, Matrix, RoutingLoads,
};
use crate::error::{Error, Result};
use crate::modular::{modularize, ArchDescriptor, ModelPair};
use crate::rng::stream;

/// Node budget of the weighted assignment search.
pub const WEIGHTED_NODE_LIMIT: u64 = 2_000_000;

#[derive(Debug, Clone)]
pub struct Enhancement {
    pub kappa1: f64,
    pub kappa2: usize,
    pub assignments: Vec<Assignment>,
    /// Target mapping per layer.
    pub targets: Vec<Matrix>,
    pub report: FinetuneReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub proxy_samples: usize,
    pub subtasks: usize,
    pub design_space_log2: usize,
    pub pretrain_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub loads: RoutingLoads,
    pub enhanced: bool,
    pub kappa1: Option<f64>,
    pub kappa2: Option<usize>,
    pub objective: Vec<f64>,
    pub exact: Vec<bool>,
    pub repaired_rows: Vec<Vec<usize>>,
    /// Per layer and sub-task, gate mass on the assigned modules after fine-tuning.
    pub alignment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct OfflineBundle {
    pub pair: ModelPair,
    pub pretrain_log: Vec<EpochLog>,
    /// Sub-task mapping after pretraining, per layer.
    pub task_map: Vec<Matrix>,
    pub enhancement: Option<Enhancement>,
    pub summary: OfflineSummary,
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

pub fn run_offline(cfg: &ScenarioConfig, data: &PreparedData) -> Result<OfflineBundle> {
    let seed = cfg.seed;
    let mut pair = staged("modularize", modularize(&cfg.model, &mut stream(seed, "init", 0, 0)))?;
    let pretrain_log = staged("pretrain", pretrain(&mut pair, &data.proxy, &cfg.pretrain, seed))?;

    let (subtasks, t) = staged("task_map", cfg.enhance.subtasks.assign(&data.proxy))?;
    let task_map = staged("task_map", build_task_map(&pair.selector, &data.proxy.x, &subtasks, t))?;

    let enhancement = if cfg.enhance.enabled {
        let widths = pair.layer_widths();
        let kappa2 = cfg.enhance.kappa2.unwrap_or(pair.selector.k);
        let mut assignments = Vec::with_capacity(widths.len());
        let mut targets = Vec::with_capacity(widths.len());
        let mut kappa1_used = 0.0;
        for (h, &n) in task_map.iter().zip(&widths) {
            let count = default_kappa1(t, kappa2, n);
            let a = match cfg.enhance.cap_mode {
                CapMode::Count => {
                    let k1 = cfg.enhance.kappa1.map_or(count, |v| v.floor() as usize);
                    kappa1_used = k1 as f64;
                    solve_assignment(h, k1, kappa2)
                }
                CapMode::Weighted => {
                    let k1 = cfg.enhance.kappa1.unwrap_or(count as f64 / kappa2 as f64);
                    kappa1_used = k1;
                    solve_assignment_weighted(h, k1, kappa2, WEIGHTED_NODE_LIMIT)
                }
            };
            let a = staged("assignment", a)?;
            let (p, _) = target_mapping(h, &a.mask);
            assignments.push(a);
            targets.push(p);
        }
        let masks: Vec<Vec<Vec<bool>>> = assignments.iter().map(|a| a.mask.clone()).collect();
        let report = staged(
            "finetune",
            finetune_enhance(&mut pair, &data.proxy, &subtasks, &targets, &masks, &cfg.enhance.finetune, seed),
        )?;
        Some(Enhancement {
            kappa1: kappa1_used,
            kappa2,
            assignments,
            targets,
            report,
        })
    } else {
        None
    };

    let test_accuracy = staged("evaluate", pair.accuracy(&data.test.x, &data.test.labels))?;
    let loads = staged("evaluate", eval_loads(&pair, &data.test.x))?;
    let summary = OfflineSummary {
        proxy_samples: data.proxy.len(),
        subtasks: t,
        design_space_log2: pair.model.design_space_log2(),
        pretrain_accuracy: pretrain_log.last().map(|e| e.accuracy),
        test_accuracy,
        loads,
        enhanced: enhancement.is_some(),
        kappa1: enhancement.as_ref().map(|e| e.kappa1),
        kappa2: enhancement.as_ref().map(|e| e.kappa2),
        objective: enhancement.iter().flat_map(|e| e.assignments.iter().map(|a| a.objective)).collect(),
        exact: enhancement.iter().flat_map(|e| e.assignments.iter().map(|a| a.exact)).collect(),
        repaired_rows: enhancement
            .iter()
            .flat_map(|e| e.assignments.iter().map(|a| a.repaired_rows.clone()))
            .collect(),
        alignment: enhancement.as_ref().map(|e| e.report.alignment.clone()).unwrap_or_default(),
    };
    Ok(OfflineBundle {
        pair,
        pretrain_log,
        task_map,
        enhancement,
        summary,
    })
}

impl OfflineBundle {
    /// Writes the checkpoint, config, logs, matrices and summary into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ScenarioConfig) -> Result<()> {
        staged("artifacts", self.write_inner(dir, cfg))
    }

    fn write_inner(&self, dir: &Path, cfg: &ScenarioConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.pair.save(&dir.join(art::CHECKPOINT), json!({ "version": 0 }))?;
        std::fs::write(dir.join(art::CONFIG), cfg.to_json())?;
        write_jsonl(&dir.join(art::PRETRAIN_LOG), &self.pretrain_log)?;
        for (l, h) in self.task_map.iter().enumerate() {
            write_matrix(&dir.join(matrix_file("h", l)), h)?;
        }
        if let Some(e) = &self.enhancement {
            write_jsonl(&dir.join(art::FINETUNE_LOG), &e.report.log)?;
            for (l, a) in e.assignments.iter().enumerate() {
                write_matrix(&dir.join(matrix_file("m", l)), &bool_rows(&a.mask))?;
                write_matrix(&dir.join(matrix_file("p", l)), &e.targets[l])?;
                write_matrix(&dir.join(matrix_file("h_after", l)), &e.report.h_after[l])?;
            }
        }
        std::fs::write(dir.join(art::SUMMARY), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

/// Loads `model.ckpt` from a checkpoint directory (or file) and checks it
/// against the architecture `cfg` describes. Returns the pair and its version.
pub fn load_checkpoint(path: &Path, cfg: &ScenarioConfig) -> Result<(ModelPair, u64)> {
    let file = if path.is_dir() { path.join(art::CHECKPOINT) } else { path.to_path_buf() };
    let (pair, extra) = ModelPair::load(&file)?;
    let expected = ArchDescriptor::of(&modularize(&cfg.model, &mut stream(0, "arch", 0, 0))?);
    if ArchDescriptor::of(&pair) != expected {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured model shape",
            file.display()
        )));
    }
    let version = extra.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0);
    Ok((pair, version))
}

