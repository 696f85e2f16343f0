//! Lifts inconsistent multi-view 2D masks into a 3D segmentation feature
//! field with hierarchical contrastive learning, and serves interactive
//! hierarchical segmentation on the result.

pub mod error;
pub mod evalbench;
pub mod field;
pub mod hier2d;
pub mod losses;
pub mod mask;
pub mod segserver;
pub mod par;
pub mod synthdata;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
