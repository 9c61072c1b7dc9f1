//! Character-level convolutional-recurrent text classification.
//!
//! Text is quantized into one-hot character rows, convolved once, and the
//! resulting feature map feeds two branches: temporal max pooling with a
//! max-over-time reduction, and a gated recurrent cell (LSTM, GRU or MGU)
//! unrolled over the frames. A convex combination of the two encodings feeds a
//! softmax classifier. Everything is differentiated by the small tape in
//! [`autodiff`], and [`gradcheck`] verifies it against finite differences.

pub mod autodiff;
pub mod bench;
pub mod cells;
pub mod checkpoint;
pub mod convert;
pub mod corpus;
pub mod cnn;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
