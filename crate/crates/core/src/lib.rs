//! Desk-scale AC optimal power flow, sparsity-inducing load embeddings, and
//! learned OPF surrogates.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`grid`] — network data model, MATPOWER-subset parsing, raw AC flow
//!    arithmetic.
//! 2. [`solver`] — a penalty-continuation AC-OPF solver with a projected
//!    limited-memory quasi-Newton core.
//! 3. [`embedding`] — the load-embedding optimization: concentrate the same
//!    total load on fewer buses while preserving the optimal dispatch and
//!    cost.
//! 4. [`dataset`] — perturbed-load instance generation with ground truths
//!    and embeddings attached.
//! 5. [`neural`], [`encoder`], [`opf_dnn`] — a small dense-network stack:
//!    load encoders that mimic the embedding optimizer, and dispatch /
//!    voltage-setpoint predictors.
//! 6. [`metrics`], [`pipeline`] — evaluation reports and end-to-end
//!    orchestration shared by the CLI.
//!
//! Everything is deterministic given explicit seeds: identical inputs
//! reproduce identical outputs byte for byte.

pub mod cases;
pub mod embedding;
pub mod grid;
pub mod solver;

pub use embedding::{
    compression_report, encode_loads, nonzero_load_count, solve_penalty_subproblem,
    verify_bilevel, BilevelReport, CompressionReport, EmbedError, EmbeddingConfig,
    EmbeddingResult, ReferenceSolution, SubproblemResult, TraceRow,
};
pub use grid::{
    branch_flow, compute_flows, dispatch_cost, parse_matpower, power_balance_residual,
    reduction_percentage, serialize_matpower, Branch, Bus, Complex, CostCurve, Generator,
    LoadVector, Network, OperatingPoint, ParseError,
};
pub use solver::{
    binding_sets, check_feasibility, project_dispatch, solve_acopf, solve_acopf_warm,
    solve_power_flow, BindingSets, SolveResult, SolveStatus, SolverConfig, ViolationReport,
};
