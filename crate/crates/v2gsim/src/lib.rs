//! Grid-emergency simulation toolkit: who participates in
//! vehicle-to-grid programs, how the fleet grows, where its capacity
//! lands on the network, and how much involuntary load shed it avoids
//! during generation outages.

pub mod allocation;
pub mod endurance;
pub mod fleet;
pub mod grid;
pub mod opf;
pub mod participation;
pub mod pf;
pub mod runner;
