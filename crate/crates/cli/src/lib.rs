//! Command-line front end and HTTP service for the captioning pipeline.

pub mod serve;
