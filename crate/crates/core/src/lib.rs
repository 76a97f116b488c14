pub mod arch;
pub mod candidate;
pub mod error;
pub mod ghn;
pub mod search;
pub mod tensor;

pub use error::{GhnError, Result};
