//! Route-flow prediction for static traffic assignment.
//!
//! A small neural network maps OD demand vectors to route flows; a
//! projection-based fixed-point operator then pulls the prediction toward
//! a Wardrop user equilibrium. A Frank-Wolfe solver produces the training
//! labels and the metric suite measures how close predictions come to the
//! equilibrium conditions.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod fixed_point;
pub mod fixtures;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod network;
pub mod pipeline;
pub mod routes;
pub mod solver;

pub use error::{Error, Result};
pub use network::{CostFamily, Link, LinkCostParams, Network, OdPair};
pub use routes::{enumerate_routes, route_costs, Incidence, RouteSet};
pub use solver::{frank_wolfe, ArcFlowSolution, FwOptions};
pub use dataset::{generate_dataset, load_dataset, sample_demands, split_dataset, Dataset};
pub use fixed_point::{fp_step, pinv_delta_od, project_demand, project_nonneg, refine, RefineOptions};
pub use metrics::{aggregate, check_conditions, evaluate_sample, MetricsRecord};
pub use mlp::{init_mlp, train, train_step, Mlp, TrainConfig};
pub use pipeline::{run_pipeline, PipelineConfig, RunManifest};
