use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::raster::Raster;
use crate::time::{Clock, Timestamp};

use super::{extract_objects, score_heatmap, DetectionObject, DetectorConfig, DetectorError};

/// Camera description reported alongside every reading.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraContext {
    pub sensor: String,
    pub hw: String,
    pub fw: String,
    pub hal: String,
    pub os: String,
    pub frame_size: String,
    pub pixformat: String,
}

impl Default for CameraContext {
    fn default() -> Self {
        Self {
            sensor: "OV5640".into(),
            hw: "OpenMV Cam H7 Plus".into(),
            fw: "4.4.3".into(),
            hal: "HAL-1.10".into(),
            os: "MicroPython 1.19".into(),
            frame_size: "512x512".into(),
            pixformat: "GRAYSCALE".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EggReading {
    /// `reading.index`, e.g. `"2.7"`.
    pub egg_id: String,
    pub centroid: (f32, f32),
    pub avg_confidence: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadingResult {
    pub reading_no: u32,
    pub egg_count: u32,
    pub eggs: Vec<EggReading>,
    pub timestamp: Timestamp,
    pub camera_context: CameraContext,
    pub snapshot_refs: Vec<String>,
}

impl ReadingResult {
    pub fn confidences(&self) -> Vec<f32> {
        self.eggs.iter().map(|e| e.avg_confidence).collect()
    }

    /// Drops the `n` least confident eggs, keeping ids of the survivors.
    pub fn drop_weakest(&mut self, n: usize) {
        let n = n.min(self.eggs.len());
        let mut order: Vec<usize> = (0..self.eggs.len()).collect();
        order.sort_by(|&a, &b| {
            self.eggs[a]
                .avg_confidence
                .partial_cmp(&self.eggs[b].avg_confidence)
                .expect("finite confidences")
                .then(b.cmp(&a))
        });
        let mut doomed: Vec<usize> = order.into_iter().take(n).collect();
        doomed.sort_unstable_by(|a, b| b.cmp(a));
        for i in doomed {
            self.eggs.remove(i);
        }
        self.egg_count = self.eggs.len() as u32;
    }

    /// One text record per egg: `egg_id x y avg_confidence`.
    pub fn to_record(&self) -> String {
        let mut out = format!(
            "reading {} {} eggs={} snapshots={}\n",
            self.reading_no,
            self.timestamp.to_rfc3339(),
            self.egg_count,
            self.snapshot_refs.join(",")
        );
        for e in &self.eggs {
            out.push_str(&format!(
                "egg {} {:.1} {:.1} {:.2}\n",
                e.egg_id, e.centroid.0, e.centroid.1, e.avg_confidence
            ));
        }
        out
    }
}

/// An object followed across the snapshots of one reading.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub members: Vec<DetectionObject>,
}

impl Track {
    pub fn mean_centroid(&self) -> (f32, f32) {
        let n = self.members.len() as f32;
        let (sx, sy) = self
            .members
            .iter()
            .fold((0.0, 0.0), |(ax, ay), o| (ax + o.centroid.0, ay + o.centroid.1));
        (sx / n, sy / n)
    }

    pub fn mean_confidence(&self) -> f32 {
        self.members.iter().map(|o| o.confidence).sum::<f32>() / self.members.len() as f32
    }
}

fn yx_key(p: (f32, f32)) -> (f32, f32) {
    (p.1, p.0)
}

/// Links objects across snapshots by nearest centroid.
///
/// Tracks are seeded from the first snapshot. For each later snapshot every
/// (track, object) pair within `match_radius_cells` is considered in order of
/// distance, ties going to the lower `(y, x)` track and then object; each track
/// and object is used at most once. Unmatched objects open new tracks.
pub fn associate(snapshots: &[Vec<DetectionObject>], cfg: &DetectorConfig) -> Vec<Track> {
    let radius = cfg.match_radius_cells * cfg.grid_cell_px as f32;
    let mut tracks: Vec<Track> = Vec::new();
    for objects in snapshots {
        let mut pairs = Vec::new();
        for (ti, track) in tracks.iter().enumerate() {
            let anchor = track.mean_centroid();
            for (oi, obj) in objects.iter().enumerate() {
                let d = ((anchor.0 - obj.centroid.0).powi(2) + (anchor.1 - obj.centroid.1).powi(2)).sqrt();
                if d <= radius {
                    pairs.push((d, yx_key(anchor), yx_key(obj.centroid), ti, oi));
                }
            }
        }
        pairs.sort_by(|a, b| {
            (a.0, a.1, a.2)
                .partial_cmp(&(b.0, b.1, b.2))
                .expect("finite distances")
        });
        let mut track_used = vec![false; tracks.len()];
        let mut obj_used = vec![false; objects.len()];
        for (_, _, _, ti, oi) in pairs {
            if !track_used[ti] && !obj_used[oi] {
                track_used[ti] = true;
                obj_used[oi] = true;
                tracks[ti].members.push(objects[oi].clone());
            }
        }
        for (oi, obj) in objects.iter().enumerate() {
            if !obj_used[oi] {
                tracks.push(Track {
                    members: vec![obj.clone()],
                });
            }
        }
    }
    tracks
}

/// Modeled time from the first snapshot to reported results.
pub fn reading_latency(cfg: &DetectorConfig) -> f64 {
    cfg.snapshots_per_reading.saturating_sub(1) as f64 * cfg.snapshot_interval_s + cfg.processing_margin_s
}

fn eggs_from_tracks(tracks: &[Track], cfg: &DetectorConfig, reading_no: u32) -> Vec<EggReading> {
    let mut kept: Vec<&Track> = tracks
        .iter()
        .filter(|t| t.members.len() == cfg.snapshots_per_reading)
        .filter(|t| t.mean_confidence() >= cfg.confidence_threshold)
        .collect();
    kept.sort_by(|a, b| {
        yx_key(a.mean_centroid())
            .partial_cmp(&yx_key(b.mean_centroid()))
            .expect("finite centroids")
    });
    kept.iter()
        .enumerate()
        .map(|(j, t)| EggReading {
            egg_id: format!("{}.{}", reading_no, j + 1),
            centroid: t.mean_centroid(),
            avg_confidence: t.mean_confidence(),
        })
        .collect()
}

/// Runs one reading over pre-extracted per-snapshot objects.
pub fn reading_from_objects(
    per_snapshot: &[Vec<DetectionObject>],
    cfg: &DetectorConfig,
    reading_no: u32,
    timestamp: Timestamp,
) -> Result<ReadingResult, DetectorError> {
    if per_snapshot.len() != cfg.snapshots_per_reading {
        return Err(DetectorError::SnapshotCount {
            expected: cfg.snapshots_per_reading,
            actual: per_snapshot.len(),
        });
    }
    let tracks = associate(per_snapshot, cfg);
    let eggs = eggs_from_tracks(&tracks, cfg, reading_no);
    Ok(ReadingResult {
        reading_no,
        egg_count: eggs.len() as u32,
        eggs,
        timestamp,
        camera_context: CameraContext::default(),
        snapshot_refs: (1..=cfg.snapshots_per_reading)
            .map(|k| format!("r{reading_no:05}-s{k}"))
            .collect(),
    })
}

/// Scores, extracts and associates the snapshots of one reading.
///
/// The timestamp is read from `clock` once processing is done.
pub fn run_reading(
    images: &[Raster],
    cfg: &DetectorConfig,
    clock: &dyn Clock,
    reading_no: u32,
) -> Result<ReadingResult, DetectorError> {
    if images.len() != cfg.snapshots_per_reading {
        return Err(DetectorError::SnapshotCount {
            expected: cfg.snapshots_per_reading,
            actual: images.len(),
        });
    }
    let per_snapshot = images
        .iter()
        .map(|img| score_heatmap(img, cfg).map(|hm| extract_objects(&hm, cfg)))
        .collect::<Result<Vec<_>, _>>()?;
    reading_from_objects(&per_snapshot, cfg, reading_no, clock.now())
}

/// Stateful detector: numbers readings and archives their snapshots.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub camera: CameraContext,
    archive_dir: Option<PathBuf>,
    next_reading: u32,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        Ok(Self {
            config,
            camera: CameraContext::default(),
            archive_dir: None,
            next_reading: 1,
        })
    }

    /// Persists every snapshot as `<dir>/rNNNNN-sK.pgm`.
    pub fn with_archive(mut self, dir: impl Into<PathBuf>) -> Self {
        self.archive_dir = Some(dir.into());
        self
    }

    pub fn readings_taken(&self) -> u32 {
        self.next_reading - 1
    }

    /// Continues numbering after `taken` earlier readings, e.g. after a reboot.
    pub fn resume_numbering(&mut self, taken: u32) {
        self.next_reading = taken + 1;
    }

    pub fn run(&mut self, images: &[Raster], clock: &dyn Clock) -> Result<ReadingResult, DetectorError> {
        let reading_no = self.next_reading;
        let mut result = run_reading(images, &self.config, clock, reading_no)?;
        result.camera_context = self.camera.clone();
        if let Some(dir) = &self.archive_dir {
            std::fs::create_dir_all(dir).map_err(|e| DetectorError::Archive(e.to_string()))?;
            for (img, name) in images.iter().zip(&result.snapshot_refs) {
                img.save_pgm(&dir.join(format!("{name}.pgm")))
                    .map_err(|e| DetectorError::Archive(e.to_string()))?;
            }
        }
        self.next_reading += 1;
        Ok(result)
    }
}
