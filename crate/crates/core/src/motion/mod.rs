//! Skeletons, the per-frame feature layout, motion containers and root
//! trajectory conversions.

mod kinematics;
mod layout;
mod sequence;
mod skeleton;

pub use kinematics::{
    global_to_relative, recover_joint_positions, relative_to_global, root_ground_positions, rotate_y,
    RootIntegration,
};
pub use layout::{BlockKind, FeatureLayout, ROOT_BLOCK};
pub(crate) use layout::hex;
pub use sequence::{MotionSequence, NormalizationStats, RootConvention, STD_FLOOR};
pub use skeleton::{SkeletonSpec, HUMANML3D_NAME, HUMANML3D_REST_HEIGHT};
