//! Human-readable reports for run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::artifacts::{self as art, read_jsonl, read_matrix};
use super::config::ScenarioConfig;
use super::data::prepare_data;
use super::online::{account_communication, Event, RoundMetrics};
use crate::cloud::Matrix;
use crate::error::{Error, Result};
use crate::modular::{ArchDescriptor, ModelPair, ModuleKind};
use crate::nn::{Parameterized, Tensor};
use crate::selector::Routing;

/// What an artifact path holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Checkpoint,
    Matrix,
    Metrics,
    Events,
    Log,
    Summary,
    Config,
    /// A pretrain or run output directory.
    Directory,
}

pub fn detect(path: &Path) -> Result<ArtifactKind> {
    if path.is_dir() {
        return Ok(ArtifactKind::Directory);
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    Ok(match (name, ext) {
        (art::METRICS, _) => ArtifactKind::Metrics,
        (art::EVENTS, _) => ArtifactKind::Events,
        (art::SUMMARY, _) => ArtifactKind::Summary,
        (art::CONFIG, _) => ArtifactKind::Config,
        (_, "ckpt") => ArtifactKind::Checkpoint,
        (_, "csv") => ArtifactKind::Matrix,
        (_, "jsonl") => ArtifactKind::Log,
        _ => return Err(Error::Format(format!("unknown artifact {}", path.display()))),
    })
}

/// Report for any artifact or artifact directory.
pub fn inspect(path: &Path) -> Result<String> {
    match detect(path)? {
        ArtifactKind::Checkpoint => inspect_checkpoint(path),
        ArtifactKind::Matrix => inspect_matrix(path),
        ArtifactKind::Metrics => inspect_metrics(path),
        ArtifactKind::Events => inspect_events(path),
        ArtifactKind::Log => inspect_log(path),
        ArtifactKind::Summary => inspect_json(path),
        ArtifactKind::Config => {
            let cfg = ScenarioConfig::load(path)?;
            Ok(format!("== {}\n{}\n", path.display(), cfg.to_json()))
        }
        ArtifactKind::Directory => inspect_dir(path),
    }
}

fn inspect_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| detect(&dir.join(n)).is_ok_and(|k| k != ArtifactKind::Directory))
        .collect();
    if names.is_empty() {
        return Err(Error::Format(format!("{} holds no known artifacts", dir.display())));
    }
    // Checkpoint first, then the rest alphabetically.
    names.sort_by_key(|n| (n != art::CHECKPOINT, n.clone()));
    let mut out = String::new();
    for n in names {
        out.push_str(&inspect(&dir.join(n))?);
        out.push('\n');
    }
    Ok(out)
}

fn module_label(kind: &ModuleKind, hidden: usize) -> String {
    match kind {
        ModuleKind::Residual => "res".into(),
        _ => format!("h{hidden}"),
    }
}

fn inspect_checkpoint(path: &Path) -> Result<String> {
    let (pair, extra) = ModelPair::load(path)?;
    let arch = ArchDescriptor::of(&pair);
    let mut s = String::new();
    let _ = writeln!(s, "== checkpoint {}", path.display());
    if extra.as_object().is_some_and(|o| !o.is_empty()) {
        let _ = writeln!(s, "meta: {extra}");
    }
    let _ = writeln!(
        s,
        "input {} -> front {:?} -> {} module layers -> {} classes",
        arch.input_dim,
        arch.front,
        arch.layers.len(),
        arch.num_classes
    );
    for (l, layer) in arch.layers.iter().enumerate() {
        let mods: Vec<String> = layer.modules.iter().map(|m| module_label(&m.kind, m.hidden)).collect();
        let _ = writeln!(
            s,
            "  layer {l}: {} -> {}, block hidden {}, {} modules [{}]",
            layer.in_dim,
            layer.out_dim,
            layer.block_hidden,
            layer.n_total,
            mods.join(" ")
        );
    }
    let _ = writeln!(s, "selector: embed {:?}, top-{}", arch.selector_embed, arch.k);
    let total = pair.total_cost();
    let _ = writeln!(
        s,
        "params: model {}, selector {}, shared cost {:?}, full cost {:?}",
        pair.model.param_count(),
        pair.selector.param_count(),
        pair.shared_cost().as_array(),
        total.as_array()
    );
    let bits = pair.model.design_space_log2();
    let _ = writeln!(
        s,
        "design space: 2^{bits} ≈ {:.2e} sub-models",
        2f64.powi(bits as i32)
    );

    let dir = path.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(art::CONFIG);
    if cfg_path.is_file() {
        let cfg = ScenarioConfig::load(&cfg_path)?;
        let data = prepare_data(&cfg)?;
        let (subtasks, t) = cfg.enhance.subtasks.assign(&data.proxy)?;
        let hist = routing_histograms(&pair, &data.proxy.x, &subtasks, t)?;
        let _ = writeln!(s, "routing on {} proxy samples, {t} sub-tasks:", data.proxy.len());
        for (l, h) in hist.iter().enumerate() {
            let _ = writeln!(s, "-- layer {l} (fraction of sub-task samples activating each module)");
            s.push_str(&table(h, false));
            let (mean, best) = overlap_summary(h, pair.selector.k);
            let _ = writeln!(s, "   top-{} Jaccard: mean {mean:.3}, most similar pair {best}", pair.selector.k);
        }
    }
    Ok(s)
}

/// Per layer, a `T × N` matrix: share of each sub-task's samples whose eval
/// routing activates each module. Rows sum to `k`.
pub fn routing_histograms(pair: &ModelPair, x: &Tensor, subtasks: &[usize], t: usize) -> Result<Vec<Matrix>> {
    let decisions = pair.selector.select(x, Routing::Eval)?;
    if decisions.len() != subtasks.len() {
        return Err(Error::shape("sub-task ids", &[decisions.len()], &[subtasks.len()]));
    }
    let widths = pair.layer_widths();
    let mut counts = vec![0usize; t];
    let mut hist: Vec<Matrix> = widths.iter().map(|&n| vec![vec![0.0; n]; t]).collect();
    for (dec, &st) in decisions.iter().zip(subtasks) {
        if st >= t {
            return Err(Error::Index {
                what: "sub-task",
                index: st,
                bound: t,
            });
        }
        counts[st] += 1;
        for (h, ld) in hist.iter_mut().zip(&dec.layers) {
            for &m in &ld.active {
                h[st][m] += 1.0;
            }
        }
    }
    for h in &mut hist {
        for (row, &c) in h.iter_mut().zip(&counts) {
            if c > 0 {
                row.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
    }
    Ok(hist)
}

/// The `k` largest entries of `row`, ties to the lower index, ascending.
pub fn top_k_set(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean pairwise top-k Jaccard and the most-overlapping pair.
fn overlap_summary(h: &Matrix, k: usize) -> (f64, String) {
    let sets: Vec<Vec<usize>> = h.iter().map(|r| top_k_set(r, k)).collect();
    let (mut sum, mut n, mut best) = (0.0, 0usize, (f64::NEG_INFINITY, 0, 0));
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            let j = jaccard(&sets[a], &sets[b]);
            sum += j;
            n += 1;
            if j > best.0 {
                best = (j, a, b);
            }
        }
    }
    if n == 0 {
        return (f64::NAN, "-".into());
    }
    (sum / n as f64, format!("({}, {}) = {:.3}", best.1, best.2, best.0))
}

fn table(m: &Matrix, show_sum: bool) -> String {
    let cols = m.first().map_or(0, Vec::len);
    let mut s = String::from("   st |");
    for c in 0..cols {
        let _ = write!(s, " {:>5}", format!("m{c}"));
    }
    if show_sum {
        s.push_str(" |   sum");
    }
    s.push('\n');
    for (t, row) in m.iter().enumerate() {
        let _ = write!(s, " {t:>4} |");
        for v in row {
            let _ = write!(s, " {v:>5.3}");
        }
        if show_sum {
            let _ = write!(s, " | {:>5.3}", row.iter().sum::<f64>());
        }
        s.push('\n');
    }
    s
}

fn inspect_matrix(path: &Path) -> Result<String> {
    let m = read_matrix(path)?;
    let cols = m.first().map_or(0, Vec::len);
    let mut s = format!("== matrix {} ({} sub-tasks × {cols} modules)\n", path.display(), m.len());
    s.push_str(&table(&m, true));
    Ok(s)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

fn parse_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).map_err(|e| Error::Parse {
                row: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn inspect_metrics(path: &Path) -> Result<String> {
    let rows: Vec<RoundMetrics> = parse_records(path)?;
    let mut s = format!("== metrics {} ({} rounds)\n", path.display(), rows.len());
    let Some(last) = rows.last() else {
        return Ok(s);
    };
    let _ = writeln!(
        s,
        "strategy {}, final accuracy {:.4}, cumulative bytes down {} up {}",
        last.strategy.name(),
        last.global_accuracy,
        last.cumulative_bytes_down,
        last.cumulative_bytes_up
    );
    if let Some(d) = median(rows.iter().filter_map(|m| m.divergence).collect()) {
        let _ = writeln!(s, "median divergence {d:.4e}");
    }
    let _ = writeln!(s, " round | accuracy | local  | bytes down |  bytes up | divergence");
    let step = rows.len().div_ceil(20).max(1);
    for m in rows.iter().step_by(step).chain(std::iter::once(last)) {
        let _ = writeln!(
            s,
            " {:>5} | {:>8.4} | {:>6} | {:>10} | {:>9} | {}",
            m.round,
            m.global_accuracy,
            m.local_accuracy_mean.map_or("-".into(), |v| format!("{v:.3}")),
            m.bytes_down,
            m.bytes_up,
            m.divergence.map_or("-".into(), |v| format!("{v:.3e}"))
        );
        if step == 1 && m.round == last.round {
            break;
        }
    }
    Ok(s)
}

fn inspect_events(path: &Path) -> Result<String> {
    let events: Vec<Event> = parse_records(path)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut skips: BTreeMap<String, usize> = BTreeMap::new();
    for e in &events {
        let tag = match e {
            Event::Participation { .. } => "participation",
            Event::Shift { .. } => "shift",
            Event::Derive { .. } => "derive",
            Event::Transfer { .. } => "transfer",
            Event::Skip { class, .. } => {
                *skips.entry(class.clone()).or_default() += 1;
                "skip"
            }
            Event::Aggregation { .. } => "aggregation",
        };
        *counts.entry(tag).or_default() += 1;
    }
    let (down, up) = account_communication(&events);
    let mut s = format!("== events {} ({} records)\n", path.display(), events.len());
    for (k, v) in &counts {
        let _ = writeln!(s, "  {k:<14} {v}");
    }
    for (k, v) in &skips {
        let _ = writeln!(s, "  skipped ({k}) {v}");
    }
    let _ = writeln!(s, "bytes down {down}, up {up}");
    Ok(s)
}

fn inspect_log(path: &Path) -> Result<String> {
    let rows = read_jsonl(path)?;
    let mut s = format!("== log {} ({} records)\n", path.display(), rows.len());
    if let Some(last) = rows.last() {
        let _ = writeln!(s, "last: {last}");
    }
    Ok(s)
}

fn inspect_json(path: &Path) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(format!("== {}\n{}\n", path.display(), serde_json::to_string_pretty(&v)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_and_jaccard() {
        assert_eq!(top_k_set(&[0.1, 0.5, 0.5, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k_set(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
        assert_eq!(jaccard(&[0, 1], &[1, 2]), 1.0 / 3.0);
        assert_eq!(jaccard(&[0, 1], &[0, 1]), 1.0);
    }

    #[test]
    fn unknown_artifacts_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("notes.txt");
        std::fs::write(&p, "hi").unwrap();
        assert_eq!(inspect(&p).unwrap_err().class(), "format");
        assert_eq!(inspect(dir.path()).unwrap_err().class(), "format");
    }

    #[test]
    fn matrix_report_prints_row_sums() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h_layer0.csv");
        art::write_matrix(&p, &[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        let r = inspect(&p).unwrap();
        assert_eq!(r.lines().filter(|l| l.trim_end().ends_with("| 1.000")).count(), 2);
    }
}
