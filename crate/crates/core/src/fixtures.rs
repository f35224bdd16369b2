//! Capacity fixtures for the four accelerator servers of the reference platform.

use crate::resources::{ResourceVector, GB};

/// 64 cores, 750 GB, eight T4 and five RTX 5000.
pub fn server1() -> ResourceVector {
    ResourceVector::cores(64)
        .with_memory_gb(750)
        .with_gpu("T4", 8)
        .with_gpu("RTX5000", 5)
}

/// 128 cores, 1024 GB, two A100 and one A30.
pub fn server2() -> ResourceVector {
    ResourceVector::cores(128)
        .with_memory_bytes(1024 * GB)
        .with_gpu("A100", 2)
        .with_gpu("A30", 1)
}

/// 128 cores, 1024 GB, three A100.
pub fn server3() -> ResourceVector {
    ResourceVector::cores(128)
        .with_memory_bytes(1024 * GB)
        .with_gpu("A100", 3)
}

/// 128 cores, 1024 GB, one RTX 5000.
pub fn server4() -> ResourceVector {
    ResourceVector::cores(128)
        .with_memory_bytes(1024 * GB)
        .with_gpu("RTX5000", 1)
}
