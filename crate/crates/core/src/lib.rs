//! An open-prompt detector at desk scale: text prompts folded into the
//! classification conv, visual prompts pooled with region-restricted
//! attention, and prompt-free detection with lazy vocabulary retrieval.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod io;
pub mod lrpc;
pub mod model;
pub mod reprta;
pub mod savpe;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
