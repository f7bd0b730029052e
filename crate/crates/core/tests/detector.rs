mod common;

use common::{corpus_rows, random_frame, CORPUS_COUNTS};
use ovinet_core::detector::{score_heatmap, Detector, DetectorConfig};
use ovinet_core::synthgen::{generate_scene, scene_corpus, GeneratorParams};
use ovinet_core::time::{sim_epoch, FixedClock};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heat_map_is_64_cells_of_8_px(seed in any::<u64>()) {
        let cfg = DetectorConfig::default();
        let hm = score_heatmap(&random_frame(seed), &cfg).unwrap();
        prop_assert_eq!(hm.side(), 64);
        prop_assert_eq!(hm.scores().len(), 4096);
        prop_assert_eq!(cfg.heatmap_side * cfg.grid_cell_px, 512);
    }

    #[test]
    fn counts_match_truth_on_clean_scenes(seed in 0u64..10_000, eggs in 0usize..12, distractors in 0usize..4) {
        let scene = generate_scene(&GeneratorParams::with_seed(seed), eggs, distractors).unwrap();
        let mut det = Detector::new(DetectorConfig::default()).unwrap();
        let r = det.run(&scene.snapshots(5), &FixedClock(sim_epoch())).unwrap();
        prop_assert_eq!(r.egg_count as usize, eggs);
        prop_assert!(r.eggs.iter().all(|e| e.avg_confidence >= 0.80));
    }
}

#[test]
fn every_reported_egg_lies_on_a_true_egg() {
    let scenes = scene_corpus(&corpus_rows(), &GeneratorParams::with_seed(2023)).unwrap();
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    for (scene, want) in scenes.iter().zip(CORPUS_COUNTS) {
        let r = det.run(&scene.snapshots(5), &FixedClock(sim_epoch())).unwrap();
        assert_eq!(r.egg_count as usize, want, "{}", scene.scene_id);
        for egg in &r.eggs {
            let (x, y) = egg.centroid;
            let nearest = scene
                .eggs
                .iter()
                .map(|t| {
                    let (cx, cy) = t.center();
                    ((cx - x).powi(2) + (cy - y).powi(2)).sqrt()
                })
                .fold(f32::INFINITY, f32::min);
            assert!(nearest <= 12.0, "{} egg {} is {nearest:.1} px from any egg", scene.scene_id, egg.egg_id);
        }
    }
}
