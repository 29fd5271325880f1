//! Command line and HTTP service for keyframe-conditioned motion generation.

pub mod cli;
pub mod service;
