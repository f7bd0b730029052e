use crate::device::SceneSource;
use crate::raster::Raster;
use crate::synthgen::{generate_scene_with_id, DepressorScene, GeneratorParams};
use crate::time::Timestamp;

/// Seed offset between consecutive scene changes of one device.
pub const SCENE_SEED_STRIDE: u64 = 7919;

struct Step {
    from: Timestamp,
    count: u32,
    scene: Option<DepressorScene>,
}

/// A tongue depressor whose contents follow a script: each step shows a
/// freshly generated scene with the scripted egg count. Scenes are rendered
/// on first use.
pub struct ScriptedScenes {
    params: GeneratorParams,
    distractors: usize,
    label: String,
    steps: Vec<Step>,
}

impl ScriptedScenes {
    pub fn new(params: GeneratorParams, distractors: usize, label: impl Into<String>) -> Self {
        Self {
            params,
            distractors,
            label: label.into(),
            steps: Vec::new(),
        }
    }

    /// Sets the count shown from `from` onwards; steps may arrive in any order.
    pub fn set(&mut self, from: Timestamp, count: u32) {
        match self.steps.binary_search_by_key(&from, |s| s.from) {
            Ok(i) => {
                self.steps[i].count = count;
                self.steps[i].scene = None;
            }
            Err(i) => self.steps.insert(
                i,
                Step {
                    from,
                    count,
                    scene: None,
                },
            ),
        }
    }

    /// Ground truth at `at`.
    pub fn count_at(&self, at: Timestamp) -> u32 {
        self.step_index(at).map_or(0, |i| self.steps[i].count)
    }

    fn step_index(&self, at: Timestamp) -> Option<usize> {
        if self.steps.is_empty() {
            return None;
        }
        Some(self.steps.partition_point(|s| s.from <= at).saturating_sub(1))
    }

    fn scene(&mut self, i: usize) -> &DepressorScene {
        if self.steps[i].scene.is_none() {
            let step = &self.steps[i];
            let params = GeneratorParams {
                seed: self.params.seed.wrapping_add(SCENE_SEED_STRIDE * i as u64),
                ..self.params.clone()
            };
            let id = format!("{}-{:03}-e{}", self.label, i, step.count);
            let scene = generate_scene_with_id(&params, step.count as usize, self.distractors, id)
                .expect("scenario scene parameters were validated");
            self.steps[i].scene = Some(scene);
        }
        self.steps[i].scene.as_ref().expect("just generated")
    }
}

impl SceneSource for ScriptedScenes {
    fn snapshots(&mut self, at: Timestamp, n: u32) -> Vec<Raster> {
        match self.step_index(at) {
            Some(i) => self.scene(i).snapshots(n),
            None => {
                let params = self.params.clone();
                generate_scene_with_id(&params, 0, self.distractors, format!("{}-empty", self.label))
                    .expect("empty scene")
                    .snapshots(n)
            }
        }
    }
}
