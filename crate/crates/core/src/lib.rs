pub mod cli;
pub mod error;
pub mod image;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optimizer;
pub mod synth;
pub mod transform;
