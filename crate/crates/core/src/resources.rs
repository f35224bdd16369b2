//! Resource vectors: CPU, memory and per-model GPU counts.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GB: u64 = 1_000_000_000;
pub const GIB: u64 = 1 << 30;

/// A quantity of compute resources.
///
/// GPUs are keyed by model name because the pools are heterogeneous: a demand
/// for an `A100` cannot be met by a `T4`. A missing key and a key mapped to
/// zero are equivalent everywhere, including in equality.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceVector {
    #[serde(default)]
    pub cpu_millicores: u64,
    #[serde(default)]
    pub memory_bytes: u64,
    #[serde(default)]
    pub gpus: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("resource underflow on {component}: {have} - {take}")]
pub struct ResourceUnderflow {
    pub component: String,
    pub have: u64,
    pub take: u64,
}

impl ResourceVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn cores(cores: u64) -> Self {
        ResourceVector {
            cpu_millicores: cores * 1000,
            ..Default::default()
        }
    }

    pub fn with_cpu_millicores(mut self, m: u64) -> Self {
        self.cpu_millicores = m;
        self
    }

    pub fn with_memory_bytes(mut self, bytes: u64) -> Self {
        self.memory_bytes = bytes;
        self
    }

    pub fn with_memory_gb(self, gb: u64) -> Self {
        self.with_memory_bytes(gb * GB)
    }

    pub fn with_gpu(mut self, model: impl Into<String>, count: u64) -> Self {
        self.gpus.insert(model.into(), count);
        self
    }

    pub fn gpu(&self, model: &str) -> u64 {
        self.gpus.get(model).copied().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.cpu_millicores == 0 && self.memory_bytes == 0 && self.gpus.values().all(|&c| c == 0)
    }

    pub fn total_gpus(&self) -> u64 {
        self.gpus.values().sum()
    }

    /// Drops zero-count GPU entries.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.gpus.retain(|_, c| *c > 0);
        out
    }

    pub fn checked_add(&self, other: &ResourceVector) -> ResourceVector {
        let mut out = self.clone();
        out.cpu_millicores += other.cpu_millicores;
        out.memory_bytes += other.memory_bytes;
        for (model, count) in &other.gpus {
            *out.gpus.entry(model.clone()).or_insert(0) += count;
        }
        out
    }

    /// Componentwise subtraction. Going negative in any component is an error.
    pub fn checked_sub(&self, other: &ResourceVector) -> Result<ResourceVector, ResourceUnderflow> {
        let underflow = |component: &str, have, take| ResourceUnderflow {
            component: component.to_string(),
            have,
            take,
        };
        let mut out = self.clone();
        out.cpu_millicores = self
            .cpu_millicores
            .checked_sub(other.cpu_millicores)
            .ok_or_else(|| underflow("cpu_millicores", self.cpu_millicores, other.cpu_millicores))?;
        out.memory_bytes = self
            .memory_bytes
            .checked_sub(other.memory_bytes)
            .ok_or_else(|| underflow("memory_bytes", self.memory_bytes, other.memory_bytes))?;
        for (model, &take) in &other.gpus {
            let have = self.gpu(model);
            let left = have
                .checked_sub(take)
                .ok_or_else(|| underflow(&format!("gpus.{model}"), have, take))?;
            out.gpus.insert(model.clone(), left);
        }
        Ok(out)
    }

    /// Multiplies every component by `n`.
    pub fn scaled(&self, n: u64) -> ResourceVector {
        ResourceVector {
            cpu_millicores: self.cpu_millicores * n,
            memory_bytes: self.memory_bytes * n,
            gpus: self.gpus.iter().map(|(m, c)| (m.clone(), c * n)).collect(),
        }
    }

    /// `self <= other` in every component, missing GPU keys counting as zero.
    pub fn le(&self, other: &ResourceVector) -> bool {
        fits(self, other)
    }
}

/// True iff `demand` is componentwise at most `free`, over every GPU model in `demand`.
pub fn fits(demand: &ResourceVector, free: &ResourceVector) -> bool {
    demand.cpu_millicores <= free.cpu_millicores
        && demand.memory_bytes <= free.memory_bytes
        && demand.gpus.iter().all(|(model, &count)| count <= free.gpu(model))
}

impl PartialEq for ResourceVector {
    fn eq(&self, other: &Self) -> bool {
        self.cpu_millicores == other.cpu_millicores
            && self.memory_bytes == other.memory_bytes
            && self.normalized().gpus == other.normalized().gpus
    }
}

impl Eq for ResourceVector {}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cpu={}m mem={}B", self.cpu_millicores, self.memory_bytes)?;
        for (model, count) in self.gpus.iter().filter(|(_, c)| **c > 0) {
            write!(f, " {model}={count}")?;
        }
        Ok(())
    }
}
