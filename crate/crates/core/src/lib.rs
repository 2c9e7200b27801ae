pub mod backbone;
pub mod features;
pub mod geo;
pub mod harness;
pub mod ingest;
pub mod nn;
pub mod poi;
pub mod retrieve;
