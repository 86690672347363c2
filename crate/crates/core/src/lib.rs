//! Cooperative 3D detection fusion between two vehicles with noisy relative
//! pose: box association by optimal transport, rigid registration of the
//! matched centers, and late fusion of the corrected detections.

// `!(x > 0.0)` style checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod registration;
pub mod rng;
pub mod scenario;

pub use association::{associate, AssignmentResult, AssociationConfig};
pub use experiment::{run_sweep, ExperimentRecord, Method, SweepConfig};
pub use fusion::{fuse_frame, CooperativeMode, Detection, FusionOutput, PipelineConfig};
pub use geometry::{box_iou_3d, relative_transform, OrientedBox, Pose, RigidTransform};
pub use registration::{estimate_correction, RansacConfig, RegistrationResult};
pub use scenario::{generate_scene, Layout, Scene, SensorSpec};
