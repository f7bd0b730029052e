//! Matched-filter cell scorer.
//!
//! Pixels darker than the midpoint between the template's egg and background
//! intensities are grouped into 8-connected blobs. A blob is egg-like when its
//! area lies within `[0.5, 2]` times the template area and its mean intensity
//! is at most `template.intensity + 0.15`. Egg-like blobs are compared with
//! the template ellipse (placed at the blob centroid, oriented along the blob's
//! principal axis) by normalized cross-correlation; that correlation becomes
//! the score of every cell the blob touches. Cells of rejected blobs are
//! capped below 0.05 and untouched cells score zero.

use crate::raster::Raster;

use super::{DetectorConfig, DetectorError, EggTemplate};

const AREA_RANGE: (f32, f32) = (0.5, 2.0);
const INTENSITY_SLACK: f32 = 0.15;
const REJECTED_CEILING: f32 = 0.04;
const MIN_CORRELATION: f32 = 0.5;
const WINDOW_PAD: usize = 3;
const TEMPLATE_SUBSAMPLES: usize = 4;

/// Square matrix of cell scores in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    side: usize,
    scores: Vec<f32>,
}

impl HeatMap {
    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            scores: vec![0.0; side * side],
        }
    }

    /// Builds a heat map from explicit scores, clamping them into `[0, 1]`.
    pub fn from_scores(side: usize, scores: Vec<f32>) -> Self {
        assert_eq!(scores.len(), side * side, "heat map size");
        Self {
            side,
            scores: scores.into_iter().map(|s| s.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, cx: usize, cy: usize) -> f32 {
        self.scores[cy * self.side + cx]
    }

    pub fn set(&mut self, cx: usize, cy: usize, score: f32) {
        self.scores[cy * self.side + cx] = score.clamp(0.0, 1.0);
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn max(&self) -> f32 {
        self.scores.iter().copied().fold(0.0, f32::max)
    }

    /// Cells scoring at or above `threshold`, as `(cx, cy)`.
    pub fn active_cells(&self, threshold: f32) -> Vec<(usize, usize)> {
        (0..self.side)
            .flat_map(|cy| (0..self.side).map(move |cx| (cx, cy)))
            .filter(|&(cx, cy)| self.get(cx, cy) >= threshold)
            .collect()
    }
}

struct Blob {
    pixels: Vec<(usize, usize)>,
}

fn label_dark_blobs(image: &Raster, threshold: f32) -> Vec<Blob> {
    let side = image.side();
    let mut seen = vec![false; side * side];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for y in 0..side {
        for x in 0..side {
            let idx = y * side + x;
            if seen[idx] || image.get(x, y) >= threshold {
                continue;
            }
            seen[idx] = true;
            stack.push((x, y));
            let mut pixels = Vec::new();
            while let Some((px, py)) = stack.pop() {
                pixels.push((px, py));
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let nx = px as i32 + dx;
                        let ny = py as i32 + dy;
                        if nx < 0 || ny < 0 || nx >= side as i32 || ny >= side as i32 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        let nidx = ny * side + nx;
                        if !seen[nidx] && image.get(nx, ny) < threshold {
                            seen[nidx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            blobs.push(Blob { pixels });
        }
    }
    blobs
}

fn template_coverage(t: &EggTemplate, cx: f32, cy: f32, theta: f32, px: usize, py: usize) -> f32 {
    let (a, b) = (t.axis_px.0 / 2.0, t.axis_px.1 / 2.0);
    let (s, c) = theta.sin_cos();
    let step = 1.0 / TEMPLATE_SUBSAMPLES as f32;
    let mut hits = 0;
    for sy in 0..TEMPLATE_SUBSAMPLES {
        for sx in 0..TEMPLATE_SUBSAMPLES {
            let dx = px as f32 + (sx as f32 + 0.5) * step - cx;
            let dy = py as f32 + (sy as f32 + 0.5) * step - cy;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                hits += 1;
            }
        }
    }
    hits as f32 / (TEMPLATE_SUBSAMPLES * TEMPLATE_SUBSAMPLES) as f32
}

/// Normalized cross-correlation between the blob neighbourhood's darkness and
/// the template ellipse.
fn template_correlation(image: &Raster, blob: &Blob, t: &EggTemplate) -> f32 {
    let side = image.side();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in &blob.pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let x0 = x0.saturating_sub(WINDOW_PAD);
    let y0 = y0.saturating_sub(WINDOW_PAD);
    let x1 = (x1 + WINDOW_PAD).min(side - 1);
    let y1 = (y1 + WINDOW_PAD).min(side - 1);

    // Darkness-weighted centroid and second moments over the blob pixels.
    let dark = |x: usize, y: usize| (t.background - image.get(x, y)).max(0.0);
    let mut w_sum = 0.0f32;
    let (mut mx, mut my) = (0.0f32, 0.0f32);
    for &(x, y) in &blob.pixels {
        let w = dark(x, y);
        w_sum += w;
        mx += w * (x as f32 + 0.5);
        my += w * (y as f32 + 0.5);
    }
    if w_sum <= 0.0 {
        return 0.0;
    }
    mx /= w_sum;
    my /= w_sum;
    let (mut mu20, mut mu02, mut mu11) = (0.0f32, 0.0f32, 0.0f32);
    for &(x, y) in &blob.pixels {
        let w = dark(x, y);
        let dx = x as f32 + 0.5 - mx;
        let dy = y as f32 + 0.5 - my;
        mu20 += w * dx * dx;
        mu02 += w * dy * dy;
        mu11 += w * dx * dy;
    }
    let theta = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);

    let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f32;
    let mut signal = Vec::with_capacity(n as usize);
    let mut templ = Vec::with_capacity(n as usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            signal.push(t.background - image.get(x, y));
            templ.push(template_coverage(t, mx, my, theta, x, y));
        }
    }
    let ms = signal.iter().sum::<f32>() / n;
    let mt = templ.iter().sum::<f32>() / n;
    let (mut num, mut ss, mut tt) = (0.0f32, 0.0f32, 0.0f32);
    for (s, t) in signal.iter().zip(&templ) {
        num += (s - ms) * (t - mt);
        ss += (s - ms).powi(2);
        tt += (t - mt).powi(2);
    }
    if ss <= 0.0 || tt <= 0.0 {
        return 0.0;
    }
    (num / (ss * tt).sqrt()).clamp(0.0, 1.0)
}

/// Scores every grid cell of a frame.
pub fn score_heatmap(image: &Raster, cfg: &DetectorConfig) -> Result<HeatMap, DetectorError> {
    let expected = cfg.input_side();
    if image.side() != expected {
        return Err(DetectorError::DimensionMismatch {
            expected,
            actual: image.side(),
        });
    }
    let t = &cfg.template;
    let threshold = (t.intensity + t.background) / 2.0;
    let area = t.area();
    let cell = cfg.grid_cell_px;
    let side = cfg.heatmap_side;
    let mut hm = HeatMap::zeros(side);

    for blob in label_dark_blobs(image, threshold) {
        let count = blob.pixels.len() as f32;
        let mean = blob.pixels.iter().map(|&(x, y)| image.get(x, y)).sum::<f32>() / count;
        let egg_like = count >= AREA_RANGE.0 * area
            && count <= AREA_RANGE.1 * area
            && mean <= t.intensity + INTENSITY_SLACK;
        let correlation = if egg_like { template_correlation(image, &blob, t) } else { 0.0 };
        let accepted = egg_like && correlation >= MIN_CORRELATION;

        let mut per_cell = std::collections::BTreeMap::<(usize, usize), u32>::new();
        for &(x, y) in &blob.pixels {
            *per_cell.entry((x / cell, y / cell)).or_default() += 1;
        }
        let peak = per_cell.values().copied().max().unwrap_or(1) as f32;
        for (&(cx, cy), &n) in &per_cell {
            let share = n as f32 / peak;
            let score = if accepted {
                correlation * (0.97 + 0.03 * share)
            } else {
                REJECTED_CEILING * share
            };
            if score > hm.get(cx, cy) {
                hm.set(cx, cy, score);
            }
        }
    }
    Ok(hm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scene, GeneratorParams};

    #[test]
    fn uniform_background_scores_low() {
        let cfg = DetectorConfig::default();
        let hm = score_heatmap(&Raster::filled(512, 0.8), &cfg).unwrap();
        assert_eq!(hm.side(), 64);
        assert!(hm.max() < 0.05);
    }

    #[test]
    fn rejects_wrong_size() {
        let cfg = DetectorConfig::default();
        let err = score_heatmap(&Raster::filled(256, 0.8), &cfg).unwrap_err();
        assert_eq!(err, DetectorError::DimensionMismatch { expected: 512, actual: 256 });
    }

    #[test]
    fn noisy_empty_scene_scores_low() {
        let cfg = DetectorConfig::default();
        let scene = generate_scene(&GeneratorParams::with_seed(5), 0, 0).unwrap();
        assert!(score_heatmap(&scene.image, &cfg).unwrap().max() < 0.05);
    }

    #[test]
    fn eggs_score_high() {
        let cfg = DetectorConfig::default();
        let scene = generate_scene(&GeneratorParams::with_seed(21), 8, 0).unwrap();
        let hm = score_heatmap(&scene.image, &cfg).unwrap();
        for egg in &scene.eggs {
            let (x, y) = egg.center();
            let s = hm.get(x as usize / 8, y as usize / 8);
            assert!(s >= 0.8, "egg at ({x},{y}) scored {s}");
        }
    }
}
