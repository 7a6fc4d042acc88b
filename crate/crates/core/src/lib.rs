pub mod error;
pub mod init;
pub mod mlm;
pub mod model;
pub mod mpo;
pub mod persist;
pub mod shared;
pub mod stability;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
