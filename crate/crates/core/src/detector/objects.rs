use serde::{Deserialize, Serialize};

use super::{DetectorConfig, HeatMap};

/// One object found in a single snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionObject {
    pub object_id: u32,
    /// Centroid in image pixels.
    pub centroid: (f32, f32),
    /// Maximum score over the member cells.
    pub confidence: f32,
    /// Member cells as `(cx, cy)`.
    pub cells: Vec<(usize, usize)>,
}

/// Groups active cells into 4-connected objects.
///
/// A cell is active when its score is at least `cfg.confidence_threshold`.
/// Centroids are the score-weighted mean of member cell centers. Objects are
/// ordered by centroid `(y, x)` and numbered from 1.
pub fn extract_objects(hm: &HeatMap, cfg: &DetectorConfig) -> Vec<DetectionObject> {
    let side = hm.side();
    let thr = cfg.confidence_threshold;
    let half = cfg.grid_cell_px as f32 / 2.0;
    let mut seen = vec![false; side * side];
    let mut objects = Vec::new();

    for cy in 0..side {
        for cx in 0..side {
            if seen[cy * side + cx] || hm.get(cx, cy) < thr {
                continue;
            }
            seen[cy * side + cx] = true;
            let mut stack = vec![(cx, cy)];
            let mut cells = Vec::new();
            while let Some((x, y)) = stack.pop() {
                cells.push((x, y));
                let neighbours = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbours {
                    if nx < side && ny < side && !seen[ny * side + nx] && hm.get(nx, ny) >= thr {
                        seen[ny * side + nx] = true;
                        stack.push((nx, ny));
                    }
                }
            }
            cells.sort_by_key(|&(x, y)| (y, x));

            let mut weight = 0.0f32;
            let (mut sx, mut sy) = (0.0f32, 0.0f32);
            let mut confidence = 0.0f32;
            for &(x, y) in &cells {
                let s = hm.get(x, y);
                weight += s;
                sx += s * (x as f32 * cfg.grid_cell_px as f32 + half);
                sy += s * (y as f32 * cfg.grid_cell_px as f32 + half);
                confidence = confidence.max(s);
            }
            objects.push(DetectionObject {
                object_id: 0,
                centroid: (sx / weight, sy / weight),
                confidence,
                cells,
            });
        }
    }

    objects.sort_by(|a, b| {
        (a.centroid.1, a.centroid.0)
            .partial_cmp(&(b.centroid.1, b.centroid.0))
            .expect("finite centroids")
    });
    for (i, o) in objects.iter_mut().enumerate() {
        o.object_id = i as u32 + 1;
    }
    objects
}
