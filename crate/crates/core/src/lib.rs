//! Cost-aware planning and simulation for elastic distributed query execution.
//!
//! The crate estimates the latency and dollar cost of distributed query plans
//! at pipeline granularity, chooses per-pipeline degrees of parallelism under
//! a latency target or a budget, replays plans against diverging runtime
//! cardinalities with pipeline-level resizing, and prices background tuning
//! actions by their net dollar rate.
//!
//! Modules, bottom up:
//!
//! - [`plan`]: operator DAGs, the plan document format, pipeline extraction.
//! - [`estimator`]: scalability models, the query simulator, calibration.
//! - [`planner`]: DOP planning, sibling balancing, bushy plan variants.
//! - [`exec`]: morsel-level execution replay with a DOP monitor.
//! - [`stats`]: trace ingestion and workload summaries.
//! - [`whatif`]: dollar-denominated evaluation of tuning proposals.
//! - [`frontier`]: latency/dollar trade-off curves.

pub mod estimator;
pub mod exec;
pub mod frontier;
pub mod plan;
pub mod planner;
pub mod stats;
pub mod whatif;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/plans.md")]
    mod plans {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/execution.md")]
    mod execution {}
    #[doc = include_str!("../../../book/src/workload.md")]
    mod workload {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/frontier.md")]
    mod frontier {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
