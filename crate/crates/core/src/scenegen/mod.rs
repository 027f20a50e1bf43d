//! Synthetic driving scenes: textured box vehicles on a flat ground plane,
//! seen from a forward-moving camera, with analytic flow and motion masks.

mod camera;
mod export;
mod render;
mod world;

pub use camera::{CameraModel, EgoState, NEAR_PLANE};
pub(crate) use export::read_json;
pub use export::{
    export_dataset, frame_name, generate_dataset, generate_scenarios, load_frame, read_centroids, read_labels,
    read_odometry, DatasetIndex, DatasetSpec, FrameCentroids, FrameLabels, LabelBox, OdometryEntry, SequenceEntry,
    StoredFrame,
};
pub use render::{raycast, render, render_all, FrameSample, HitBuffers, ObjectCentroid, Surface};
pub use world::{make_world, make_world_with, EgoMotion, Scenario, SceneObject, WorldConfig};
