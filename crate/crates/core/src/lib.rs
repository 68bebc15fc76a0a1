//! Schedule-driven SPMD partitioning for SSA tensor programs.
//!
//! The pipeline: a tensor program ([`ir`]) is partitioned by tiling values
//! along mesh axes and propagating those tilings ([`rewrite`], driven by the
//! [`tmr`] table), lowered to device-local code with collectives ([`spmd`]),
//! and costed ([`sim`]). [`schedule`] strings these steps together from
//! tactic lists.

pub mod ir;
pub mod nest;
pub mod rewrite;
pub mod schedule;
pub mod sim;
pub mod spmd;
pub mod tmr;
pub mod zoo;
