//! BlocksWorld world model.
//!
//! Four STRIPS actions over named blocks, a plan validator that reports the
//! first violated precondition, a breadth-first optimal solver used as the
//! ground-truth planner, a seeded instance generator, and the text formats
//! (PlanBench-style statements and numbered plans) models read and write.

mod generate;
mod solver;
pub(crate) mod state;
mod text;

pub use generate::{generate_dataset, generate_instance, COLOR_PALETTE, MAX_GENERATED_BLOCKS};
pub use solver::{solve_bfs, MAX_SOLVER_BLOCKS};
pub use state::{
    apply_action, is_legal, validate_plan, Action, ActionKind, BlockId, GoalAtom, Instance, Plan, Position,
    ValidationReport, Violation, WorldState,
};
pub use text::{
    describe_state, find_instance_in_prompt, parse_instance_text, parse_plan_text, render_action, render_instance,
    render_plan, InstanceText, ParsedPlan, PLAN_MARKER,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("illegal action: {0}")]
    IllegalAction(Violation),
    #[error("invalid block name {0:?}")]
    InvalidBlockName(String),
    #[error("invalid world state: {0}")]
    InvalidState(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("no plan steps could be parsed ({skipped} lines skipped)")]
    EmptyPlan { skipped: usize },
    #[error("could not parse instance statement: {0}")]
    StatementParse(String),
    #[error("instance generation exhausted after {attempts} attempts")]
    GenerationExhausted { attempts: usize },
    #[error("invalid generator arguments: {0}")]
    InvalidArguments(String),
}
