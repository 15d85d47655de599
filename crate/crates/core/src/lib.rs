pub mod cli;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image_only;
pub mod joint;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{concat_cols, concat_rows, Tape, Var};
pub use tensor::Tensor;
