//! Relative localization of two planar agents from inter-agent range, velocities and
//! yaw rates.

pub mod control;
pub mod ekf;
pub mod geometry;
pub mod observability;
pub mod ranging;
pub mod scenario;
