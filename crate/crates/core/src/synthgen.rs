//! Synthetic tongue-depressor scenes with exact ground truth.
//!
//! A scene is a 512×512 greyscale frame of a pale depressor carrying dark
//! elliptical eggs and optional distractors (seeds, soil, stones, grains).
//! At the chosen optical scale of ~0.08 mm/px an egg is a ~10×6 px ellipse.
//!
//! Distractors are built so that every one of them is either at least twice
//! the nominal egg area or at least 0.3 brighter than an egg.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

/// Frame side in pixels.
pub const IMAGE_SIDE: usize = 512;
/// Side of one heat-map cell, used for the separation invariant.
pub const CELL_PX: usize = 8;
/// Margin between the frame border and the depressor.
pub const DEPRESSOR_MARGIN: usize = 24;

const SUBSAMPLES: usize = 4;
const MAX_ATTEMPTS_PER_OBJECT: usize = 4000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("cannot place {requested} eggs with the required separation (placed {placed})")]
    PlacementInfeasible { requested: usize, placed: usize },
    #[error("cannot place distractor {index} without touching an egg")]
    DistractorInfeasible { index: usize },
    #[error("scene {scene_id}: {source}")]
    Scene {
        scene_id: String,
        #[source]
        source: Box<SynthError>,
    },
    #[error("empty corpus specification")]
    EmptyCorpus,
    #[error("corpus specification line {line}: {message}")]
    CorpusFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    Seed,
    Soil,
    Stone,
    Grain,
}

impl DistractorKind {
    pub const ALL: [DistractorKind; 4] = [Self::Seed, Self::Soil, Self::Stone, Self::Grain];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seed => "seed",
            Self::Soil => "soil",
            Self::Stone => "stone",
            Self::Grain => "grain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    /// Full (major, minor) egg axis lengths in pixels.
    pub egg_axis_px: (f32, f32),
    /// Relative per-egg jitter applied to both axes.
    pub egg_size_jitter: f32,
    pub egg_intensity: f32,
    pub background_intensity: f32,
    pub noise_sigma: f32,
    pub distractor_kinds: BTreeSet<DistractorKind>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            seed: 0,
            egg_axis_px: (10.0, 6.0),
            egg_size_jitter: 0.08,
            egg_intensity: 0.15,
            background_intensity: 0.80,
            noise_sigma: 0.02,
            distractor_kinds: DistractorKind::ALL.into_iter().collect(),
        }
    }
}

impl GeneratorParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let unit = |name: &str, v: f32| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SynthError::InvalidParams(format!("{name}={v} outside [0,1]")))
            }
        };
        unit("egg_intensity", self.egg_intensity)?;
        unit("background_intensity", self.background_intensity)?;
        unit("noise_sigma", self.noise_sigma)?;
        if !(0.0..0.5).contains(&self.egg_size_jitter) {
            return Err(SynthError::InvalidParams(format!(
                "egg_size_jitter={} outside [0,0.5)",
                self.egg_size_jitter
            )));
        }
        let (major, minor) = self.egg_axis_px;
        if !(major > minor && minor > 0.0) {
            return Err(SynthError::InvalidParams(format!(
                "egg axes must satisfy major > minor > 0, got ({major}, {minor})"
            )));
        }
        if major > 4.0 * CELL_PX as f32 {
            return Err(SynthError::InvalidParams(format!(
                "egg major axis {major}px too large for the frame"
            )));
        }
        if self.background_intensity - self.egg_intensity < 0.2 {
            return Err(SynthError::InvalidParams(
                "eggs must be at least 0.2 darker than the background".into(),
            ));
        }
        Ok(())
    }

    /// Nominal egg area in pixels.
    pub fn egg_area(&self) -> f32 {
        std::f32::consts::PI * self.egg_axis_px.0 * self.egg_axis_px.1 / 4.0
    }
}

/// A filled ellipse: center, semi-axes and rotation of the major axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub semi_major: f32,
    pub semi_minor: f32,
    pub rotation: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) <= 1.0
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)` in continuous coordinates.
    pub fn bounds(&self) -> (f32, f32, f32, f32) {
        let (s, c) = self.rotation.sin_cos();
        let hx = ((self.semi_major * c).powi(2) + (self.semi_minor * s).powi(2)).sqrt();
        let hy = ((self.semi_major * s).powi(2) + (self.semi_minor * c).powi(2)).sqrt();
        (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
    }

    pub fn area(&self) -> f32 {
        std::f32::consts::PI * self.semi_major * self.semi_minor
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EggTruth {
    pub shape: Ellipse,
}

impl EggTruth {
    pub fn center(&self) -> (f32, f32) {
        (self.shape.cx, self.shape.cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub kind: DistractorKind,
    pub center: (f32, f32),
    /// Ellipses making up the footprint (soil is a cluster of specks).
    pub parts: Vec<Ellipse>,
    pub intensity: f32,
}

impl Distractor {
    pub fn footprint_area(&self) -> f32 {
        self.parts.iter().map(Ellipse::area).sum()
    }
}

/// A generated depressor with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepressorScene {
    pub scene_id: String,
    pub image: Raster,
    pub eggs: Vec<EggTruth>,
    pub distractors: Vec<Distractor>,
    params: GeneratorParams,
}

impl DepressorScene {
    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn egg_count(&self) -> usize {
        self.eggs.len()
    }

    /// Re-renders the scene with an independent noise draw for snapshot `k`.
    ///
    /// Snapshot 0 is identical to [`DepressorScene::image`].
    pub fn snapshot(&self, k: u32) -> Raster {
        render(&self.params, &self.eggs, &self.distractors, k)
    }

    pub fn snapshots(&self, n: u32) -> Vec<Raster> {
        (0..n).map(|k| self.snapshot(k)).collect()
    }

    /// Sidecar ground-truth record.
    pub fn truth_record(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scene_id {}", self.scene_id);
        let _ = writeln!(out, "eggs {}", self.eggs.len());
        for e in &self.eggs {
            let s = e.shape;
            let _ = writeln!(
                out,
                "egg {:.3} {:.3} {:.4} {:.3} {:.3}",
                s.cx, s.cy, s.rotation, s.semi_major * 2.0, s.semi_minor * 2.0
            );
        }
        let _ = writeln!(out, "distractors {}", self.distractors.len());
        for d in &self.distractors {
            let _ = writeln!(
                out,
                "distractor {} {:.3} {:.3} {:.1} {:.3}",
                d.kind.as_str(),
                d.center.0,
                d.center.1,
                d.footprint_area(),
                d.intensity
            );
        }
        out
    }

    /// Writes `<scene_id>.pgm` and `<scene_id>.truth` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        self.image.save_pgm(&dir.join(format!("{}.pgm", self.scene_id)))?;
        std::fs::write(dir.join(format!("{}.truth", self.scene_id)), self.truth_record())?;
        Ok(())
    }
}

/// Cells touched by an ellipse's bounding box, inflated by one pixel.
fn footprint_cells(e: &Ellipse) -> (i32, i32, i32, i32) {
    let (x0, y0, x1, y1) = e.bounds();
    let c = CELL_PX as f32;
    (
        ((x0 - 1.0) / c).floor() as i32,
        ((y0 - 1.0) / c).floor() as i32,
        ((x1 + 1.0) / c).floor() as i32,
        ((y1 + 1.0) / c).floor() as i32,
    )
}

/// True when two footprints overlap or touch, diagonals included.
fn cells_touch(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> bool {
    a.0 <= b.2 + 1 && b.0 <= a.2 + 1 && a.1 <= b.3 + 1 && b.1 <= a.3 + 1
}

fn depressor_contains(x: f32, y: f32, pad: f32) -> bool {
    let lo = DEPRESSOR_MARGIN as f32 + pad;
    let hi = (IMAGE_SIDE - DEPRESSOR_MARGIN) as f32 - pad;
    (lo..hi).contains(&x) && (lo..hi).contains(&y)
}

fn random_point(rng: &mut ChaCha8Rng, pad: f32) -> (f32, f32) {
    let lo = DEPRESSOR_MARGIN as f32 + pad;
    let hi = (IMAGE_SIDE - DEPRESSOR_MARGIN) as f32 - pad;
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn sample_egg(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Ellipse {
    let j = params.egg_size_jitter;
    let scale = |rng: &mut ChaCha8Rng| if j > 0.0 { 1.0 + rng.random_range(-j..j) } else { 1.0 };
    let (cx, cy) = random_point(rng, 12.0);
    Ellipse {
        cx,
        cy,
        semi_major: params.egg_axis_px.0 / 2.0 * scale(rng),
        semi_minor: params.egg_axis_px.1 / 2.0 * scale(rng),
        rotation: rng.random_range(0.0..std::f32::consts::PI),
    }
}

fn sample_distractor(params: &GeneratorParams, kind: DistractorKind, rng: &mut ChaCha8Rng) -> Distractor {
    let egg_major = params.egg_axis_px.0 / 2.0;
    let egg_minor = params.egg_axis_px.1 / 2.0;
    let (cx, cy) = random_point(rng, 24.0);
    let rotation = rng.random_range(0.0..std::f32::consts::PI);
    let ellipse = |a: f32, b: f32, x: f32, y: f32, rot: f32| Ellipse {
        cx: x,
        cy: y,
        semi_major: a,
        semi_minor: b,
        rotation: rot,
    };
    let bg = params.background_intensity;
    let egg = params.egg_intensity;
    let (parts, intensity) = match kind {
        // Large and dark: rejected on area.
        DistractorKind::Stone => {
            let a = egg_major * rng.random_range(2.2..2.8);
            let b = egg_minor * rng.random_range(3.0..3.6);
            (vec![ellipse(a.max(b), a.min(b), cx, cy, rotation)], egg + 0.10)
        }
        DistractorKind::Seed => {
            let a = egg_major * rng.random_range(2.0..2.4);
            let b = egg_minor * rng.random_range(1.9..2.2);
            (vec![ellipse(a, b, cx, cy, rotation)], egg + 0.12)
        }
        // Egg-sized but pale: rejected on intensity.
        DistractorKind::Grain => {
            let a = egg_major * rng.random_range(1.4..1.6);
            let b = egg_minor * rng.random_range(1.2..1.35);
            (vec![ellipse(a, b, cx, cy, rotation)], (egg + 0.40).min(bg - 0.12))
        }
        DistractorKind::Soil => {
            let specks = rng.random_range(3..=5);
            let parts = (0..specks)
                .map(|_| {
                    let r = rng.random_range(1.5..3.0);
                    let ang = rng.random_range(0.0..std::f32::consts::TAU);
                    let dist = rng.random_range(0.0..9.0);
                    ellipse(r, r * 0.8, cx + dist * ang.cos(), cy + dist * ang.sin(), rotation)
                })
                .collect();
            (parts, (egg + 0.38).min(bg - 0.12))
        }
    };
    Distractor {
        kind,
        center: (cx, cy),
        parts,
        intensity,
    }
}

fn coverage(e: &Ellipse, px: usize, py: usize) -> f32 {
    let step = 1.0 / SUBSAMPLES as f32;
    let mut hits = 0;
    for sy in 0..SUBSAMPLES {
        for sx in 0..SUBSAMPLES {
            let x = px as f32 + (sx as f32 + 0.5) * step;
            let y = py as f32 + (sy as f32 + 0.5) * step;
            if e.contains(x, y) {
                hits += 1;
            }
        }
    }
    hits as f32 / (SUBSAMPLES * SUBSAMPLES) as f32
}

fn paint(buf: &mut [f32], e: &Ellipse, intensity: f32) {
    let (x0, y0, x1, y1) = e.bounds();
    let clamp = |v: f32| (v.max(0.0) as usize).min(IMAGE_SIDE - 1);
    for py in clamp(y0.floor())..=clamp(y1.ceil()) {
        for px in clamp(x0.floor())..=clamp(x1.ceil()) {
            let c = coverage(e, px, py);
            if c > 0.0 {
                let v = &mut buf[py * IMAGE_SIDE + px];
                *v = *v * (1.0 - c) + intensity * c;
            }
        }
    }
}

fn render(params: &GeneratorParams, eggs: &[EggTruth], distractors: &[Distractor], snapshot: u32) -> Raster {
    let bg = params.background_intensity;
    let rim = bg * 0.9;
    let mut buf = vec![rim; IMAGE_SIDE * IMAGE_SIDE];
    for y in DEPRESSOR_MARGIN..IMAGE_SIDE - DEPRESSOR_MARGIN {
        buf[y * IMAGE_SIDE + DEPRESSOR_MARGIN..y * IMAGE_SIDE + IMAGE_SIDE - DEPRESSOR_MARGIN].fill(bg);
    }
    for d in distractors {
        for part in &d.parts {
            paint(&mut buf, part, d.intensity);
        }
    }
    for egg in eggs {
        paint(&mut buf, &egg.shape, params.egg_intensity);
    }
    if params.noise_sigma > 0.0 {
        let noise_seed = params
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(snapshot) + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0f32, params.noise_sigma).expect("finite sigma");
        for v in &mut buf {
            *v += normal.sample(&mut rng);
        }
    }
    Raster::from_normalized(IMAGE_SIDE, &buf)
}

/// Generates one scene. Deterministic for a fixed `params.seed`.
pub fn generate_scene(
    params: &GeneratorParams,
    egg_count: usize,
    distractor_count: usize,
) -> Result<DepressorScene, SynthError> {
    let scene_id = format!("s{}-e{}-d{}", params.seed, egg_count, distractor_count);
    generate_scene_with_id(params, egg_count, distractor_count, scene_id)
}

pub fn generate_scene_with_id(
    params: &GeneratorParams,
    egg_count: usize,
    distractor_count: usize,
    scene_id: String,
) -> Result<DepressorScene, SynthError> {
    params.validate()?;
    if distractor_count > 0 && params.distractor_kinds.is_empty() {
        return Err(SynthError::InvalidParams(
            "distractors requested but no distractor kinds enabled".into(),
        ));
    }
    // Each egg needs at least a 3×3 cell neighbourhood of its own.
    let usable_cells = ((IMAGE_SIDE - 2 * DEPRESSOR_MARGIN) / CELL_PX).pow(2);
    if egg_count > usable_cells / 9 {
        return Err(SynthError::PlacementInfeasible {
            requested: egg_count,
            placed: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut taken: Vec<(i32, i32, i32, i32)> = Vec::new();
    let mut eggs = Vec::with_capacity(egg_count);
    'eggs: for _ in 0..egg_count {
        for _ in 0..MAX_ATTEMPTS_PER_OBJECT {
            let shape = sample_egg(params, &mut rng);
            let cells = footprint_cells(&shape);
            if taken.iter().all(|t| !cells_touch(*t, cells)) {
                taken.push(cells);
                eggs.push(EggTruth { shape });
                continue 'eggs;
            }
        }
        return Err(SynthError::PlacementInfeasible {
            requested: egg_count,
            placed: eggs.len(),
        });
    }

    let kinds: Vec<DistractorKind> = params.distractor_kinds.iter().copied().collect();
    let mut distractors = Vec::with_capacity(distractor_count);
    'distractors: for index in 0..distractor_count {
        let kind = kinds[index % kinds.len()];
        for _ in 0..MAX_ATTEMPTS_PER_OBJECT {
            let d = sample_distractor(params, kind, &mut rng);
            let inside = d
                .parts
                .iter()
                .all(|p| {
                    let (x0, y0, x1, y1) = p.bounds();
                    depressor_contains(x0, y0, 2.0) && depressor_contains(x1, y1, 2.0)
                });
            let cells: Vec<_> = d.parts.iter().map(footprint_cells).collect();
            let clear = cells
                .iter()
                .all(|c| taken.iter().all(|t| !cells_touch(*t, *c)));
            if inside && clear {
                taken.extend(cells);
                distractors.push(d);
                continue 'distractors;
            }
        }
        return Err(SynthError::DistractorInfeasible { index });
    }

    let image = render(params, &eggs, &distractors, 0);
    Ok(DepressorScene {
        scene_id,
        image,
        eggs,
        distractors,
        params: params.clone(),
    })
}

/// One row of a corpus specification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub scene_id: String,
    pub egg_count: usize,
    pub distractor_count: usize,
}

impl CorpusRow {
    pub fn new(scene_id: impl Into<String>, egg_count: usize, distractor_count: usize) -> Self {
        Self {
            scene_id: scene_id.into(),
            egg_count,
            distractor_count,
        }
    }
}

/// Parses `scene_id,egg_count,distractor_count` lines. A header row is optional.
pub fn parse_corpus_spec(text: &str) -> Result<Vec<CorpusRow>, SynthError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SynthError::CorpusFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        if i == 0 && record.get(0) == Some("scene_id") {
            continue;
        }
        if record.len() != 3 {
            return Err(SynthError::CorpusFormat {
                line: i + 1,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let num = |idx: usize| {
            record[idx].parse::<usize>().map_err(|e| SynthError::CorpusFormat {
                line: i + 1,
                message: format!("field {}: {e}", idx + 1),
            })
        };
        rows.push(CorpusRow::new(&record[0], num(1)?, num(2)?));
    }
    Ok(rows)
}

/// Generates one scene per row. Row `i` uses seed `params.seed + i`.
pub fn scene_corpus(spec: &[CorpusRow], params: &GeneratorParams) -> Result<Vec<DepressorScene>, SynthError> {
    if spec.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    spec.iter()
        .enumerate()
        .map(|(i, row)| {
            let p = GeneratorParams {
                seed: params.seed.wrapping_add(i as u64),
                ..params.clone()
            };
            generate_scene_with_id(&p, row.egg_count, row.distractor_count, row.scene_id.clone())
                .map_err(|e| SynthError::Scene {
                    scene_id: row.scene_id.clone(),
                    source: Box::new(e),
                })
        })
        .collect()
}
