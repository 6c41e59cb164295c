//! Coarse-to-fine rigid registration of partially overlapping point clouds.
//!
//! The pipeline matches semi-dense nodes with sparse attention guided by
//! geometric consistency, predicts keypoint correspondences inside matched
//! patches, filters them with a compatibility-graph embedding, solves the
//! pose in closed form and refines it with dense local matches.

pub mod attention;
pub mod bench;
pub mod coarse;
pub mod consistency;
pub mod error;
pub mod fine;
pub mod geometry;
pub mod losses;
pub mod pipeline;

pub use error::{Error, Result};
pub use geometry::{Correspondence, NodeMatch, PointCloud, RigidTransform};
