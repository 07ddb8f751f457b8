//! Noise schedules, exact forward noising, reverse-time drift fields, and the
//! Euler-Maruyama reverse sampler.

mod drift;
mod integrator;
mod schedule;

pub use drift::{
    reverse_drift, ControlDrift, DriftField, EstimatorDrift, FnDrift, FrozenDrift, OracleDrift,
    ReferenceDrift,
};
pub use integrator::{
    forward_sample, forward_sample_batch, simulate_reverse, simulate_reverse_with_cost, Init, PathCost, ReverseRun,
    ReverseSampler, StepCost, Trajectory,
};
pub use schedule::{BetaKind, NoiseSchedule};
