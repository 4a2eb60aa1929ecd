pub mod fit1d;
pub mod metrics;
pub mod scene_fit;
