//! Cycle-approximate out-of-order core model with speculative memory access
//! control, dynamic region instances, lazy revocation and an attack harness.

pub mod alloc;
pub mod harness;
pub mod instance;
pub mod memory;
pub mod pipeline;
pub mod report;
pub mod smact;
pub mod trace;
