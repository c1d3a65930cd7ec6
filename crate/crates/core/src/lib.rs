//! Multi-view 3D hand keypoint lifting, clustering and tracking.

pub mod assignment;
pub mod clustering;
pub mod geometry;
pub mod io_formats;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod threshold_search;

pub use clustering::{HandEstimate, HandStatus, MatchingMode, Side, TrackId};
pub use geometry::{CameraModel, Detection2D, GeometryError, Pose3D};
pub use threshold_search::{ConfigError, Criterion, ExpectedHands, SearchConfig};
