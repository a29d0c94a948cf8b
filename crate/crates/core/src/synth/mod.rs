//! Synthetic occlusion sequences and static composites standing in for real video datasets.

pub mod io;
pub mod render;
pub mod sequence;
pub mod spec;

pub use io::{read_dataset, read_manifest, write_dataset, Manifest};
pub use sequence::{
    composites_as_sequences, generate_sequence, generate_sequences, generate_static_composites, simulate,
    FrameAnnotation, ObjectAnnotation, Scene, SequenceSample,
};
pub use spec::{BackgroundKind, OccluderStyle, Preset, SceneSpec};
