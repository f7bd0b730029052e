//! Grid-centroid egg detection.
//!
//! The pipeline mirrors a FOMO-style detector: a 512×512 frame is split into
//! 8×8-pixel cells, every cell gets a score in `[0, 1]` (the 64×64 heat map),
//! cells at or above the confidence threshold are merged into 4-connected
//! objects and each object reports a centroid. A reading takes several
//! snapshots of the same depressor, tracks objects across them and keeps the
//! eggs whose averaged confidence clears the threshold.
//!
//! Cell scores come from a matched filter against an elliptical egg template
//! (see [`scorer`]), not from a trained network.

mod objects;
mod reading;
pub mod scorer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use objects::{extract_objects, DetectionObject};
pub use reading::{
    associate, reading_from_objects, reading_latency, run_reading, CameraContext, Detector, EggReading, ReadingResult, Track,
};
pub use scorer::{score_heatmap, HeatMap};

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("image is {actual}×{actual}, detector expects {expected}×{expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("expected {expected} snapshots, got {actual}")]
    SnapshotCount { expected: usize, actual: usize },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("snapshot archive: {0}")]
    Archive(String),
}

/// Appearance of the egg the matched filter looks for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EggTemplate {
    /// Full (major, minor) axis lengths in pixels.
    pub axis_px: (f32, f32),
    pub intensity: f32,
    pub background: f32,
}

impl Default for EggTemplate {
    fn default() -> Self {
        Self {
            axis_px: (10.0, 6.0),
            intensity: 0.15,
            background: 0.80,
        }
    }
}

impl EggTemplate {
    pub fn area(&self) -> f32 {
        std::f32::consts::PI * self.axis_px.0 * self.axis_px.1 / 4.0
    }
}

/// Training settings of the reference model. Descriptive only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub architecture: String,
    pub layers: u32,
    pub filters: u32,
    pub kernel_size: u32,
    pub strides: u32,
    pub activation: String,
    pub alpha: f32,
    pub training_cycles: u32,
    pub learning_rate: f32,
    pub input_num_channels: u32,
    pub num_classes: u32,
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self {
            architecture: "FOMO (MobileNetV2)".into(),
            layers: 1,
            filters: 32,
            kernel_size: 1,
            strides: 1,
            activation: "ReLU6".into(),
            alpha: 0.35,
            training_cycles: 200,
            learning_rate: 0.001,
            input_num_channels: 1,
            num_classes: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub grid_cell_px: usize,
    pub heatmap_side: usize,
    pub confidence_threshold: f32,
    pub snapshots_per_reading: usize,
    pub snapshot_interval_s: f64,
    /// Time spent after the last snapshot before results are reported.
    pub processing_margin_s: f64,
    pub match_radius_cells: f32,
    pub template: EggTemplate,
    pub model_meta: ModelMeta,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid_cell_px: 8,
            heatmap_side: 64,
            confidence_threshold: 0.80,
            snapshots_per_reading: 5,
            snapshot_interval_s: 2.0,
            processing_margin_s: 2.0,
            match_radius_cells: 2.0,
            template: EggTemplate::default(),
            model_meta: ModelMeta::default(),
        }
    }
}

impl DetectorConfig {
    pub fn input_side(&self) -> usize {
        self.heatmap_side * self.grid_cell_px
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        if self.grid_cell_px == 0 || self.heatmap_side == 0 {
            return bad("grid geometry must be non-zero".into());
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return bad(format!("confidence_threshold {} not in (0,1]", self.confidence_threshold));
        }
        if self.snapshots_per_reading == 0 {
            return bad("snapshots_per_reading must be at least 1".into());
        }
        if self.snapshot_interval_s < 0.0 || self.processing_margin_s < 0.0 {
            return bad("timings must be non-negative".into());
        }
        if self.match_radius_cells < 0.0 {
            return bad("match_radius_cells must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_is_64_by_8() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.input_side(), 512);
        assert_eq!(cfg.confidence_threshold, 0.80);
        assert_eq!(cfg.model_meta.activation, "ReLU6");
        assert_eq!(cfg.model_meta.learning_rate, 0.001);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_zero_threshold_and_snapshots() {
        let mut cfg = DetectorConfig {
            confidence_threshold: 0.0,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.confidence_threshold = 0.8;
        cfg.snapshots_per_reading = 0;
        assert!(cfg.validate().is_err());
    }
}
