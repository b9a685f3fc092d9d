//! Non-IID partitioning of a source pool over devices, and in-place data
//! shift.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

/// What a device's data is skewed on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewKind {
    /// Each device holds `m` classes.
    #[default]
    Label,
    /// Each device holds `m` groups (clusters or users).
    Feature,
}

impl SkewKind {
    pub fn key(self, data: &Dataset, row: usize) -> usize {
        match self {
            SkewKind::Label => data.labels[row],
            SkewKind::Feature => data.groups[row],
        }
    }
}

/// Source rows bucketed by skew key, drawn without replacement until a
/// bucket runs dry and with replacement after that.
#[derive(Debug, Clone)]
pub struct KeyedPool {
    pub data: Dataset,
    pub kind: SkewKind,
    buckets: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    /// Rows handed out more than once.
    pub reused: usize,
}

impl KeyedPool {
    pub fn new<R: Rng + ?Sized>(data: Dataset, kind: SkewKind, rng: &mut R) -> Self {
        let keys = (0..data.len()).map(|r| kind.key(&data, r)).max().map_or(0, |k| k + 1);
        let mut buckets = vec![Vec::new(); keys];
        for r in 0..data.len() {
            buckets[kind.key(&data, r)].push(r);
        }
        for b in &mut buckets {
            b.shuffle(rng);
        }
        Self {
            cursor: vec![0; keys],
            data,
            kind,
            buckets,
            reused: 0,
        }
    }

    pub fn num_keys(&self) -> usize {
        self.buckets.len()
    }

    /// Keys that have at least one row.
    pub fn live_keys(&self) -> Vec<usize> {
        (0..self.buckets.len()).filter(|&k| !self.buckets[k].is_empty()).collect()
    }

    /// `n` row indices with key `key`.
    pub fn draw<R: Rng + ?Sized>(&mut self, key: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let bucket = self
            .buckets
            .get(key)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::EmptyDataset(format!("no source samples for key {key}")))?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let c = &mut self.cursor[key];
            if *c < bucket.len() {
                out.push(bucket[*c]);
                *c += 1;
            } else {
                out.push(bucket[rng.random_range(0..bucket.len())]);
                self.reused += 1;
            }
        }
        Ok(out)
    }

    pub fn take<R: Rng + ?Sized>(&mut self, key: usize, n: usize, rng: &mut R) -> Result<Dataset> {
        let rows = self.draw(key, n, rng)?;
        Ok(self.data.subset(&rows))
    }
}

/// One device's share of the source data.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceData {
    pub device: usize,
    /// Assigned classes (label skew) or groups (feature skew), ascending.
    pub keys: Vec<usize>,
    pub kind: SkewKind,
    pub data: Dataset,
}

/// Splits `n` into `parts` near-equal counts, larger ones first.
fn split_even(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// Gives each device `m` distinct keys and a size uniform in `size_range`.
pub fn partition_noniid(
    pool: &mut KeyedPool,
    num_devices: usize,
    m: usize,
    size_range: (usize, usize),
    seed: u64,
) -> Result<Vec<DeviceData>> {
    let live = pool.live_keys();
    if m == 0 || m > live.len() {
        return Err(Error::Config(format!(
            "devices need 1..={} distinct keys, got m = {m}",
            live.len()
        )));
    }
    let (lo, hi) = size_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("bad local size range [{lo}, {hi}]")));
    }
    if lo < m {
        return Err(Error::Config(format!("local size {lo} cannot cover {m} keys")));
    }
    let mut out = Vec::with_capacity(num_devices);
    for device in 0..num_devices {
        let mut rng = stream(seed, "partition", device as u64, 0);
        let mut keys: Vec<usize> = sample(&mut rng, live.len(), m).into_iter().map(|i| live[i]).collect();
        keys.sort_unstable();
        let size = rng.random_range(lo..=hi);
        let mut data = Dataset::empty(pool.data.dim(), pool.data.num_classes);
        for (&key, count) in keys.iter().zip(split_even(size, m)) {
            data.extend(&pool.take(key, count, &mut rng)?)?;
        }
        out.push(DeviceData {
            device,
            keys,
            kind: pool.kind,
            data,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEvent {
    pub device: usize,
    pub replaced: usize,
    /// `(dropped, added)` key when class drift re-assigned one.
    pub swapped: Option<(usize, usize)>,
}

/// Replaces `⌊fraction·|D|⌋` uniformly chosen samples with fresh ones drawn
/// by `draw(key, n)`. With `drift_keys`, one assigned key is first swapped
/// for an unassigned one from `drift_keys`, and replaced samples of the
/// dropped key are redrawn from the new key.
pub fn shift_data<R, F>(
    device: &mut DeviceData,
    fraction: f64,
    drift_keys: Option<&[usize]>,
    mut draw: F,
    rng: &mut R,
) -> Result<ShiftEvent>
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize) -> Result<Dataset>,
{
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("shift fraction must be in [0, 1], got {fraction}")));
    }
    let n = device.data.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut swapped = None;
    if let Some(all) = drift_keys {
        let free: Vec<usize> = all.iter().copied().filter(|k| !device.keys.contains(k)).collect();
        if !free.is_empty() && !device.keys.is_empty() {
            let pos = rng.random_range(0..device.keys.len());
            let added = free[rng.random_range(0..free.len())];
            let dropped = std::mem::replace(&mut device.keys[pos], added);
            device.keys.sort_unstable();
            swapped = Some((dropped, added));
        }
    }
    if count == 0 {
        return Ok(ShiftEvent {
            device: device.device,
            replaced: 0,
            swapped,
        });
    }
    let mut positions = sample(rng, n, count).into_vec();
    positions.sort_unstable();
    let mut by_key: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for &p in &positions {
        let mut key = device.kind.key(&device.data, p);
        if let Some((dropped, added)) = swapped {
            if key == dropped {
                key = added;
            }
        }
        by_key.entry(key).or_default().push(p);
    }
    let dim = device.data.dim();
    for (key, rows) in by_key {
        let fresh = draw(key, rows.len())?;
        if fresh.len() != rows.len() || fresh.dim() != dim {
            return Err(Error::shape("shift draw", &[rows.len(), dim], &[fresh.len(), fresh.dim()]));
        }
        for (j, &p) in rows.iter().enumerate() {
            device.data.x.row_mut(p).copy_from_slice(fresh.x.row(j));
            device.data.labels[p] = fresh.labels[j];
            device.data.groups[p] = fresh.groups[j];
        }
    }
    Ok(ShiftEvent {
        device: device.device,
        replaced: count,
        swapped,
    })
}
