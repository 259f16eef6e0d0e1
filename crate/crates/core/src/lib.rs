//! Spatial propagation operators for refining dense depth maps from sparse
//! measurements.
//!
//! * [`cspn`]: fixed k x k stencils with abs-normalized affinities.
//! * [`dspn`]: deformable neighbourhoods with feature-similarity softmax
//!   affinities and a convolutional offset estimator.
//! * [`confidence`]: confidence targets and confidence-weighted replacement.
//! * [`gradcheck`]: hand-written reverse pass, finite-difference checks and a
//!   gradient-descent fitter.
//! * [`synth`]: synthetic scenes and deterministic coarse-depth / feature
//!   stand-ins.
//! * [`io`]: GRD1 grid files and 16-bit binary PGM depth maps.
//! * [`pipeline`]: end-to-end runs used by the `dspn` binary.

pub mod confidence;
pub mod cspn;
pub mod dspn;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod neighborhood;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{ContinuousPos, Grid};
pub use neighborhood::KernelSize;
