//! Command-line pipelines and the HTTP prompt service built on `icl-core`.

pub mod commands;
pub mod data;
pub mod service;
