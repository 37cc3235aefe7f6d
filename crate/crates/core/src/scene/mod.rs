//! Synthetic arena: a 2D lidar world around the panel, renders of the panel
//! face (wrenches and valve) and point clouds standing in for dense stereo.

mod arena;
mod panel_face;
mod scenario;

pub use arena::*;
pub use panel_face::*;
pub use scenario::*;
