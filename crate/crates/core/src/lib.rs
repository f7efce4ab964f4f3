//! State-space-duality sequence kernels, four-direction BEV serialization,
//! temporal BEV fusion and a Mamba-mixed DETR-style detection head, together
//! with a synthetic BEV detection benchmark.

pub mod bench;
pub mod bevseq;
pub mod error;
pub mod fusion;
pub mod head;
pub mod numerics;
pub mod ssd;

pub use error::{Error, Result};
