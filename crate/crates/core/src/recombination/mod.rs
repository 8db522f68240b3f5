//! Moment-preserving measure reduction and the tree pre-processing loop.

mod basis;
mod localize;
mod measure;
mod preprocess;
mod reduce;

pub use basis::TestBasis;
pub use localize::{localize, localize_pointwise, Ball, Localization};
pub use measure::DiscreteMeasure;
pub use preprocess::{klv_step, preprocess, PreprocessManifest, RadiusPolicy, WeightTable};
pub use reduce::{recombine, recombine_with_stats, reduction_iteration, rmp, RecombineStats};
