//! Core algorithms for robust coordination of connected automated vehicles
//! (CAVs) at a signal-free intersection.
//!
//! Each CAV entering the control zone plans a cubic nominal trajectory that
//! minimizes its exit time subject to speed, control, rear-end, and
//! lateral-headway constraints. While driving, it observes the deviation of
//! its actual time trajectory from the nominal one, learns that deviation
//! online with Gaussian-process regression, propagates it into confidence
//! tubes around time, position, and speed, and replans so the safety
//! constraints hold for every in-tube realization.
//!
//! The crate is `no_std` + `alloc`; all floating-point transcendentals go
//! through [`libm`] so results are bit-reproducible across platforms. IO,
//! configuration, and file formats live in the companion `robocoord` crate.
//!
//! Module map:
//! - [`trajectory`]: cubic trajectory algebra (boundary-value solve,
//!   evaluation, time-at-position inversion, feasible exit-time window).
//! - [`gp`]: Gaussian-process regression over time-deviation observations
//!   (Matérn 3/2 kernel, marginal-likelihood fit, posterior queries).
//! - [`uncertainty`]: pushes the GP posterior through the cubic into
//!   speed/position deviation moments and bounded confidence intervals.
//! - [`coordination`]: intersection geometry, the coordinator database,
//!   robust exit-time optimization, and the event handlers.
//! - [`sim`]: scenario generation, ground-truth deviation injection, the
//!   event-driven run loop, and safety/throughput metrics.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod coordination;
pub mod gp;
pub mod math;
mod optim;
mod rng;
pub mod sim;
pub mod trajectory;
pub mod uncertainty;
