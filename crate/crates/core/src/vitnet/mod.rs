//! The three networks: frozen teacher, encoder student, decoder student,
//! and the noisy bottleneck from teacher to decoder.

mod bottleneck;
mod config;
mod model;
mod params;
mod pyramid;
mod vit;

pub use bottleneck::Bottleneck;
pub use config::{BottleneckConfig, ViTConfig};
pub use model::{check_compatible, BoundStudents, DualStudentModel};
pub use params::ParamStore;
pub use pyramid::{
    fuse_teacher_mid, group_features, group_range, FeaturePyramid, PyramidValues, Role, NUM_GROUPS,
    TEACHER_MID_LAYERS,
};
pub use vit::{InputKind, VisionTransformer};
