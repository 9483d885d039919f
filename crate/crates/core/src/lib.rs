//! Cross-supervised two-stage object detection at desk scale.

pub mod featurizer;
pub mod geometry;
pub mod raster;
pub mod seeding;
pub mod synthworld;
pub mod taxonomy;
pub mod detector;
pub mod losses;
pub mod trainer;
pub mod evaluator;
pub mod pipeline;
