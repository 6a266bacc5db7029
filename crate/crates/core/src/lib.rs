//! Two-level auto-parallelization planner for dataflow graphs on 2-D device
//! clusters.
//!
//! The crate is organised as a pipeline of passes:
//!
//! * [`graph`]: operator graph IR, synthetic builders, JSON format;
//! * [`mesh`]: cluster grid, submesh shapes, logical views, exact covering;
//! * [`sharding`]: sharding specs, parallel algorithms, resharding;
//! * [`cost`]: analytic collective, compute and memory model;
//! * [`intra`]: per-stage sharding ILP and its exact solver;
//! * [`inter`]: operator clustering and the stage-slicing DP;
//! * [`orchestrate`]: cross-mesh resharding and pipeline instruction lists;
//! * [`sim`]: discrete-event simulator for the instruction lists.
//!
//! All latencies are [`Time`] values (integer picoseconds) so that the
//! planner's predictions and the simulator's measurements compare exactly.

pub mod cost;
pub mod graph;
pub mod inter;
pub mod intra;
pub mod mesh;
pub mod orchestrate;
pub mod sharding;
pub mod sim;
pub mod time;

pub use time::Time;
