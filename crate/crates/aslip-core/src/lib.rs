//! Planning toolkit for the actuated SLIP running model: hybrid dynamics,
//! event-driven simulation, direct-collocation gait optimization, and a
//! disturbance-robust variant that shares one control signal across ground
//! heights.

pub mod collocation;
pub mod interp;
pub mod model;
pub mod nlp;
pub mod ode;
pub mod plan;
pub mod sim;
pub mod solver;

pub use model::{Mode, Params, State};
pub use plan::{MotionPlan, TouchdownPolicy};
