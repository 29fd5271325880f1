use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SkeletonSpec;
use crate::error::{Error, Result};

/// Named column blocks of a per-frame feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// Heading: angular velocity in the relative convention, absolute angle
    /// in the global one.
    RootAngle,
    /// Planar root displacement (relative) or position (global), `x, z`.
    RootXz,
    RootHeight,
    /// Root-relative positions of every non-root joint.
    LocalPositions,
    /// 6D rotations of every non-root joint.
    LocalRotations,
    /// Per-frame velocities of every joint, root included.
    Velocities,
    FootContacts,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::RootAngle => "root_angle",
            BlockKind::RootXz => "root_xz",
            BlockKind::RootHeight => "root_height",
            BlockKind::LocalPositions => "local_positions",
            BlockKind::LocalRotations => "local_rotations",
            BlockKind::Velocities => "velocities",
            BlockKind::FootContacts => "foot_contacts",
        }
    }
}

/// Width of the root/global block that leads every layout.
pub const ROOT_BLOCK: usize = 4;

/// Column map for a skeleton. The root block is always present; the other
/// blocks can be dropped for reduced layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    joints: usize,
    root: usize,
    width: usize,
    blocks: Vec<(BlockKind, Range<usize>)>,
    contact_joints: [usize; 4],
}

impl FeatureLayout {
    /// Full HumanML3D-style layout: `4 + 3(J-1) + 6(J-1) + 3J + 4` columns.
    pub fn canonical(skel: &SkeletonSpec) -> Self {
        Self::with_blocks(
            skel,
            &[
                BlockKind::LocalPositions,
                BlockKind::LocalRotations,
                BlockKind::Velocities,
                BlockKind::FootContacts,
            ],
        )
    }

    pub fn with_blocks(skel: &SkeletonSpec, extra: &[BlockKind]) -> Self {
        let j = skel.joint_count();
        let mut blocks = vec![
            (BlockKind::RootAngle, 0..1),
            (BlockKind::RootXz, 1..3),
            (BlockKind::RootHeight, 3..4),
        ];
        let mut at = ROOT_BLOCK;
        for kind in [
            BlockKind::LocalPositions,
            BlockKind::LocalRotations,
            BlockKind::Velocities,
            BlockKind::FootContacts,
        ] {
            if !extra.contains(&kind) {
                continue;
            }
            let w = match kind {
                BlockKind::LocalPositions => 3 * (j - 1),
                BlockKind::LocalRotations => 6 * (j - 1),
                BlockKind::Velocities => 3 * j,
                BlockKind::FootContacts => 4,
                _ => unreachable!(),
            };
            blocks.push((kind, at..at + w));
            at += w;
        }
        Self {
            joints: j,
            root: skel.root,
            width: at,
            blocks,
            contact_joints: skel.contact_joints,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn blocks(&self) -> &[(BlockKind, Range<usize>)] {
        &self.blocks
    }

    pub fn block(&self, kind: BlockKind) -> Option<Range<usize>> {
        self.blocks.iter().find(|b| b.0 == kind).map(|b| b.1.clone())
    }

    pub fn require(&self, kind: BlockKind) -> Result<Range<usize>> {
        self.block(kind).ok_or(Error::MissingBlock(kind.name()))
    }

    /// Slot of a non-root joint inside the per-joint blocks that skip the root.
    fn local_slot(&self, joint: usize) -> usize {
        debug_assert_ne!(joint, self.root);
        if joint > self.root {
            joint - 1
        } else {
            joint
        }
    }

    pub fn local_position_columns(&self, joint: usize) -> Option<Range<usize>> {
        if joint == self.root {
            return None;
        }
        let b = self.block(BlockKind::LocalPositions)?;
        let s = b.start + 3 * self.local_slot(joint);
        Some(s..s + 3)
    }

    pub fn local_rotation_columns(&self, joint: usize) -> Option<Range<usize>> {
        if joint == self.root {
            return None;
        }
        let b = self.block(BlockKind::LocalRotations)?;
        let s = b.start + 6 * self.local_slot(joint);
        Some(s..s + 6)
    }

    pub fn velocity_columns(&self, joint: usize) -> Option<Range<usize>> {
        let b = self.block(BlockKind::Velocities)?;
        let s = b.start + 3 * joint;
        Some(s..s + 3)
    }

    pub fn contact_column(&self, joint: usize) -> Option<usize> {
        let b = self.block(BlockKind::FootContacts)?;
        self.contact_joints
            .iter()
            .position(|&c| c == joint)
            .map(|slot| b.start + slot)
    }

    /// Contact columns of the body side a foot or ankle joint belongs to.
    pub fn contact_side_columns(&self, joint: usize) -> Vec<usize> {
        let Some(b) = self.block(BlockKind::FootContacts) else {
            return Vec::new();
        };
        match self.contact_joints.iter().position(|&c| c == joint) {
            Some(slot) if slot < 2 => vec![b.start, b.start + 1],
            Some(_) => vec![b.start + 2, b.start + 3],
            None => Vec::new(),
        }
    }

    /// Columns owned by a joint. The root owns the global block and its own
    /// velocity; contact columns belong to their ankle/foot joint.
    pub fn joint_columns(&self, joint: usize) -> Vec<usize> {
        let mut cols = Vec::new();
        if joint == self.root {
            cols.extend(0..ROOT_BLOCK);
        }
        for r in [
            self.local_position_columns(joint),
            self.local_rotation_columns(joint),
            self.velocity_columns(joint),
        ]
        .into_iter()
        .flatten()
        {
            cols.extend(r);
        }
        cols.extend(self.contact_column(joint));
        cols
    }

    /// Joint owning a column.
    pub fn column_owner(&self, col: usize) -> Option<usize> {
        if col >= self.width {
            return None;
        }
        (0..self.joints).find(|&j| self.joint_columns(j).contains(&col))
    }

    /// Stable fingerprint of the column map.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("layout/v1 joints={} root={} width={}", self.joints, self.root, self.width));
        for (kind, r) in &self.blocks {
            h.update(format!(";{}={}..{}", kind.name(), r.start, r.end));
        }
        h.update(format!(";contacts={:?}", self.contact_joints));
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
