//! Compiler and parallel executor for GNN computational graphs on CPU.

pub mod cli;
pub mod error;
pub mod exec;
pub mod graph;
pub mod ir;
pub mod oracle;
pub mod passes;
pub mod tensor;

pub use error::{Error, Result};
