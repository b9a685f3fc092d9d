use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Bytes per stored parameter.
pub const BYTES_PER_PARAM: u64 = 8;
/// Training memory multiplier: parameters, gradients and optimizer scratch.
pub const MEM_FACTOR: u64 = 3;
/// Training compute multiplier over a forward pass.
pub const TRAIN_MACS_FACTOR: u64 = 3;

/// Per-sample training resource footprint of a module or sub-model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceCost {
    pub comm_bytes: u64,
    pub compute_macs: u64,
    pub mem_bytes: u64,
}

impl ResourceCost {
    pub fn for_params(params: usize, forward_macs: u64) -> Self {
        let comm = params as u64 * BYTES_PER_PARAM;
        Self {
            comm_bytes: comm,
            compute_macs: forward_macs * TRAIN_MACS_FACTOR,
            mem_bytes: comm * MEM_FACTOR,
        }
    }

    pub fn as_array(&self) -> [u64; 3] {
        [self.comm_bytes, self.compute_macs, self.mem_bytes]
    }

    pub fn fits_within(&self, other: &ResourceCost) -> bool {
        self.comm_bytes <= other.comm_bytes && self.compute_macs <= other.compute_macs && self.mem_bytes <= other.mem_bytes
    }
}

pub const DIMENSION_NAMES: [&str; 3] = ["comm_bytes", "compute_macs", "mem_bytes"];

impl Add for ResourceCost {
    type Output = ResourceCost;

    fn add(self, o: ResourceCost) -> ResourceCost {
        ResourceCost {
            comm_bytes: self.comm_bytes + o.comm_bytes,
            compute_macs: self.compute_macs + o.compute_macs,
            mem_bytes: self.mem_bytes + o.mem_bytes,
        }
    }
}

impl AddAssign for ResourceCost {
    fn add_assign(&mut self, o: ResourceCost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ResourceCost {
    fn sum<I: Iterator<Item = ResourceCost>>(iter: I) -> Self {
        iter.fold(ResourceCost::default(), |a, b| a + b)
    }
}
