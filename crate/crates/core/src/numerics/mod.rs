//! Deterministic seeded RNG and the dense f64 kernels the rest of the crate
//! builds on. Everything here is bit-reproducible: the same inputs produce
//! identical output bits, and reductions use a fixed left-to-right order.

mod mat;
mod rng;

pub use mat::Mat;
pub use rng::RngStream;
