//! Two-way person and firm effect models on linked employer-employee panels.

pub mod cli;
pub mod decomp;
pub mod fe;
pub mod graph;
pub mod kss;
pub mod me;
pub mod panel;
pub mod sim;
pub mod solver;
