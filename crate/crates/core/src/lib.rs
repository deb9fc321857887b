//! Prompt-component attribution for language-agent planning.

pub mod attribution;
pub mod blocksworld;
pub mod conformance;
pub mod gateway;
pub mod harness;
pub mod memory;
pub mod prompt;
pub mod util;
