pub mod alloc;
pub mod dct;
pub mod error;
pub mod harness;
pub mod layers;
pub mod saliency;
pub mod rigl;
pub mod sparse;
pub mod spectrum;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
