//! Heart-rate estimation from wrist PPG with a three-axis accelerometer
//! reference.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`ma_filter`]: a bias-free two-layer linear convolution maps
//!    acceleration to a motion-artifact estimate. It is fitted without labels
//!    per subject and activity by matching the PPG spectrum, then subtracted.
//! 2. [`nn`]: a shared convolution stack embeds the current and previous
//!    windows, temporal attention lets the current window attend to the
//!    previous one, and a two-unit head outputs a Gaussian over heart rate.
//! 3. [`augment`]: band-stopped copies with random labels teach the model
//!    to be uncertain when the cardiac component is gone, and 2x time
//!    compression extends the label range.
//! 4. [`eval`]: the Gaussian's mass within a tolerance of its mean is used
//!    to keep or drop each window; metrics and leave-one-subject-out folds.
//!
//! [`synth`] generates sessions with known ground truth for all of the above.

pub mod augment;
pub mod error;
pub mod eval;
pub mod frame;
pub mod ingest;
pub mod kv;
pub mod ma_filter;
pub mod nn;
pub mod pipeline;
pub mod records;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
pub use frame::SampleFrame;
pub use ingest::{load_session, validate_session, write_session, SessionRecording};
