use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use socialcircle::data::{build_windows, parse_trajectory_file_with_unit, DataError, Unit};
use socialcircle::PredictionCase;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: DataError },
    #[error("scene `{0}` appears twice")]
    DuplicateScene(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub case_ids: Vec<String>,
}

/// Windowed cases of one or more scenes, addressable by case id.
#[derive(Clone, Debug, Default)]
pub struct CaseIndex {
    pub t_h: usize,
    pub t_f: usize,
    scenes: Vec<SceneSummary>,
    cases: HashMap<String, PredictionCase>,
}

/// Scene id of a trajectory file: its file stem.
pub fn scene_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl CaseIndex {
    pub fn new(t_h: usize, t_f: usize) -> Self {
        CaseIndex {
            t_h,
            t_f,
            ..Default::default()
        }
    }

    /// Loads every file as its own scene.
    pub fn from_files(
        paths: &[PathBuf],
        unit: Unit,
        t_h: usize,
        t_f: usize,
        stride: usize,
    ) -> Result<Self, LoadError> {
        let mut index = CaseIndex::new(t_h, t_f);
        for path in paths {
            let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
                path: path.clone(),
                source,
            })?;
            let tracks =
                parse_trajectory_file_with_unit(&text, unit).map_err(|source| LoadError::Data {
                    path: path.clone(),
                    source,
                })?;
            let scene = scene_id(path);
            index.add_scene(&scene, build_windows(&tracks, &scene, t_h, t_f, stride))?;
        }
        Ok(index)
    }

    pub fn add_scene(
        &mut self,
        scene_id: &str,
        cases: Vec<PredictionCase>,
    ) -> Result<(), LoadError> {
        if self.scenes.iter().any(|s| s.scene_id == scene_id) {
            return Err(LoadError::DuplicateScene(scene_id.to_string()));
        }
        let case_ids = cases.iter().map(|c| c.case_id.clone()).collect();
        self.scenes.push(SceneSummary {
            scene_id: scene_id.to_string(),
            case_ids,
        });
        self.cases
            .extend(cases.into_iter().map(|c| (c.case_id.clone(), c)));
        Ok(())
    }

    pub fn scenes(&self) -> &[SceneSummary] {
        &self.scenes
    }

    pub fn get(&self, case_id: &str) -> Option<&PredictionCase> {
        self.cases.get(case_id)
    }

    /// All cases in scene order, then window order.
    pub fn cases(&self) -> Vec<&PredictionCase> {
        self.scenes
            .iter()
            .flat_map(|s| s.case_ids.iter().map(|id| &self.cases[id]))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}
