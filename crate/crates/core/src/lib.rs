//! Perception, pose estimation and mission control for a ground robot that
//! finds an instrument panel, picks the right wrench off it and turns a valve
//! stem. A synthetic arena simulator stands in for the sensors.

pub mod cascade;
pub mod error;
pub mod geometry;
pub mod image;
pub mod mission;
pub mod panel;
pub mod ransac;
pub mod scene;
pub mod seed;
pub mod stats;
pub mod valve;
pub mod vision;
pub mod wrench;

pub use error::{Error, Result};
