//! JSON documents for scenes and detection frames.
//!
//! Every document carries a `format` tag. Loading checks the tag, parses
//! strictly (unknown fields are rejected) and validates every box and pose,
//! reporting the offending field path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Detection;
use crate::geometry::{OrientedBox, Pose};
use crate::scenario::{Bounds, Scene};

pub const SCENE_FORMAT: &str = "coopfuse-scene/1";
pub const FRAME_FORMAT: &str = "coopfuse-frame/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("malformed document: field `format` is `{found}`, expected `{expected}`")]
    Format { found: String, expected: &'static str },
    #[error("malformed document: field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl IoError {
    /// True when the document exists but its content is unusable.
    pub fn is_malformed(&self) -> bool {
        matches!(
            self,
            IoError::Parse(_) | IoError::Format { .. } | IoError::Invalid { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub format: String,
    pub objects: Vec<OrientedBox>,
    pub ego_pose: Pose,
    pub cav_pose: Pose,
    pub bounds: Bounds,
    /// Settings that produced the scene, if recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl From<&Scene> for SceneDocument {
    fn from(scene: &Scene) -> Self {
        Self {
            format: SCENE_FORMAT.to_string(),
            objects: scene.objects.clone(),
            ego_pose: scene.ego_pose,
            cav_pose: scene.cav_pose,
            bounds: scene.bounds,
            generator: None,
        }
    }
}

/// Detections of one frame, each list in its vehicle's own frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDocument {
    pub format: String,
    pub frame: u64,
    pub ego_pose: Pose,
    /// Pose as reported by the CAV, possibly noisy.
    pub cav_pose: Pose,
    pub ego_detections: Vec<Detection>,
    pub cav_detections: Vec<Detection>,
}

impl FrameDocument {
    pub fn new(
        frame: u64,
        ego_pose: Pose,
        cav_pose: Pose,
        ego_detections: Vec<Detection>,
        cav_detections: Vec<Detection>,
    ) -> Self {
        Self {
            format: FRAME_FORMAT.to_string(),
            frame,
            ego_pose,
            cav_pose,
            ego_detections,
            cav_detections,
        }
    }
}

fn invalid(field: impl Into<String>, message: impl ToString) -> IoError {
    IoError::Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

fn check_format(found: &str, expected: &'static str) -> Result<(), IoError> {
    if found == expected {
        Ok(())
    } else {
        Err(IoError::Format {
            found: found.to_string(),
            expected,
        })
    }
}

fn check_detections(field: &str, detections: &[Detection]) -> Result<(), IoError> {
    for (k, d) in detections.iter().enumerate() {
        d.validate().map_err(|e| invalid(format!("{field}[{k}]"), e))?;
    }
    Ok(())
}

pub fn scene_to_json(scene: &Scene) -> String {
    scene_to_json_with(scene, None)
}

pub fn scene_to_json_with(scene: &Scene, generator: Option<serde_json::Value>) -> String {
    let doc = SceneDocument {
        generator,
        ..SceneDocument::from(scene)
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("scene serializes");
    text.push('\n');
    text
}

pub fn scene_from_json(text: &str) -> Result<Scene, IoError> {
    let doc: SceneDocument = serde_json::from_str(text)?;
    check_format(&doc.format, SCENE_FORMAT)?;
    for (k, obj) in doc.objects.iter().enumerate() {
        obj.validate().map_err(|e| invalid(format!("objects[{k}]"), e))?;
    }
    doc.ego_pose.validate().map_err(|e| invalid("ego_pose", e))?;
    doc.cav_pose.validate().map_err(|e| invalid("cav_pose", e))?;
    let b = doc.bounds;
    if !(b.min.iter().chain(&b.max).all(|v| v.is_finite()) && b.min[0] <= b.max[0] && b.min[1] <= b.max[1]) {
        return Err(invalid("bounds", "min must not exceed max"));
    }
    Ok(Scene {
        objects: doc.objects,
        ego_pose: doc.ego_pose,
        cav_pose: doc.cav_pose,
        bounds: doc.bounds,
    })
}

pub fn frame_to_json(frame: &FrameDocument) -> String {
    let mut text = serde_json::to_string_pretty(frame).expect("frame serializes");
    text.push('\n');
    text
}

pub fn frame_from_json(text: &str) -> Result<FrameDocument, IoError> {
    let doc: FrameDocument = serde_json::from_str(text)?;
    check_format(&doc.format, FRAME_FORMAT)?;
    doc.ego_pose.validate().map_err(|e| invalid("ego_pose", e))?;
    doc.cav_pose.validate().map_err(|e| invalid("cav_pose", e))?;
    check_detections("ego_detections", &doc.ego_detections)?;
    check_detections("cav_detections", &doc.cav_detections)?;
    Ok(doc)
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_scene(path: &Path) -> Result<Scene, IoError> {
    scene_from_json(&read(path)?)
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<(), IoError> {
    write_text(path, &scene_to_json(scene))
}

pub fn load_frame(path: &Path) -> Result<FrameDocument, IoError> {
    frame_from_json(&read(path)?)
}

pub fn save_frame(path: &Path, frame: &FrameDocument) -> Result<(), IoError> {
    write_text(path, &frame_to_json(frame))
}
