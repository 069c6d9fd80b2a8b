//! Topo-metric mapping and coarse-to-fine monocular relocalization.

pub mod coarse;
pub mod experiments;
pub mod features;
pub mod fine;
pub mod geometry;
pub mod imaging;
pub mod mapping;
pub mod pipeline;
pub mod synthworld;
