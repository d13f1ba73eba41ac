//! Library surface of the experiment CLI: configuration, manifests, and
//! the subcommand implementations. The binary in `main.rs` is a thin
//! argument-parsing layer over [`commands`].

pub mod commands;
pub mod config;
pub mod manifest;
pub mod svg;
