use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic tree of a character: joint names, parents, rest offsets and the
/// joints that take part in foot contact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub joint_names: Vec<String>,
    /// `None` only for the root joint.
    pub parents: Vec<Option<usize>>,
    /// Offset from the parent joint in the rest pose, meters.
    pub rest_offsets: Vec<[f64; 3]>,
    /// Contact joints in feature order: left ankle, left foot, right ankle,
    /// right foot.
    pub contact_joints: [usize; 4],
    pub root: usize,
}

pub const HUMANML3D_NAME: &str = "humanml3d-22";

/// Height of the pelvis above the ground in the rest pose of the canonical
/// skeleton, meters.
pub const HUMANML3D_REST_HEIGHT: f64 = 0.87;

impl SkeletonSpec {
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<[f64; 3]>,
        contact_joints: [usize; 4],
        root: usize,
    ) -> Result<Self> {
        let skel = Self {
            name: name.into(),
            joint_names,
            parents,
            rest_offsets,
            contact_joints,
            root,
        };
        skel.validate()?;
        Ok(skel)
    }

    /// The 22-joint body used by HumanML3D (263 features per frame).
    pub fn humanml3d() -> Self {
        const JOINTS: [(&str, i32, [f64; 3]); 22] = [
            ("pelvis", -1, [0.0, 0.0, 0.0]),
            ("left_hip", 0, [0.09, -0.06, 0.0]),
            ("right_hip", 0, [-0.09, -0.06, 0.0]),
            ("spine1", 0, [0.0, 0.11, -0.01]),
            ("left_knee", 1, [0.0, -0.38, 0.0]),
            ("right_knee", 2, [0.0, -0.38, 0.0]),
            ("spine2", 3, [0.0, 0.13, 0.0]),
            ("left_ankle", 4, [0.0, -0.40, 0.0]),
            ("right_ankle", 5, [0.0, -0.40, 0.0]),
            ("spine3", 6, [0.0, 0.05, 0.02]),
            ("left_foot", 7, [0.0, -0.03, 0.12]),
            ("right_foot", 8, [0.0, -0.03, 0.12]),
            ("neck", 9, [0.0, 0.21, -0.02]),
            ("left_collar", 9, [0.07, 0.12, -0.01]),
            ("right_collar", 9, [-0.07, 0.12, -0.01]),
            ("head", 12, [0.0, 0.09, 0.04]),
            ("left_shoulder", 13, [0.11, 0.03, 0.0]),
            ("right_shoulder", 14, [-0.11, 0.03, 0.0]),
            ("left_elbow", 16, [0.02, -0.26, 0.0]),
            ("right_elbow", 17, [-0.02, -0.26, 0.0]),
            ("left_wrist", 18, [0.0, -0.25, 0.02]),
            ("right_wrist", 19, [0.0, -0.25, 0.02]),
        ];
        let joint_names = JOINTS.iter().map(|j| j.0.to_string()).collect();
        let parents = JOINTS
            .iter()
            .map(|j| usize::try_from(j.1).ok())
            .collect();
        let rest_offsets = JOINTS.iter().map(|j| j.2).collect();
        Self::new(HUMANML3D_NAME, joint_names, parents, rest_offsets, [7, 10, 8, 11], 0)
            .expect("canonical skeleton is well formed")
    }

    /// Resolves a skeleton by the name stored in sidecars and checkpoints.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            HUMANML3D_NAME | "humanml3d" | "t2m" => Ok(Self::humanml3d()),
            other => Err(Error::Invalid(format!("unknown skeleton `{other}`"))),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_id(&self, name: &str) -> Result<usize> {
        let wanted = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        if wanted == "root" {
            return Ok(self.root);
        }
        self.joint_names
            .iter()
            .position(|n| *n == wanted)
            .ok_or_else(|| Error::UnknownJoint(name.to_string()))
    }

    pub fn foot_joints(&self) -> &[usize] {
        &self.contact_joints
    }

    /// Head and both wrists, the joints tracked by a VR headset and two
    /// controllers.
    pub fn vr_joints(&self) -> Result<[usize; 3]> {
        Ok([
            self.joint_id("head")?,
            self.joint_id("left_wrist")?,
            self.joint_id("right_wrist")?,
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_names.len();
        if j < 2 {
            return Err(Error::Invalid(format!("skeleton needs at least 2 joints, got {j}")));
        }
        if self.parents.len() != j || self.rest_offsets.len() != j {
            return Err(Error::Shape(format!(
                "skeleton arrays disagree: {j} names, {} parents, {} offsets",
                self.parents.len(),
                self.rest_offsets.len()
            )));
        }
        if self.root >= j || self.parents[self.root].is_some() {
            return Err(Error::Invalid("root joint must exist and have no parent".into()));
        }
        for (idx, parent) in self.parents.iter().enumerate() {
            match parent {
                None if idx != self.root => {
                    return Err(Error::Invalid(format!("joint {idx} has no parent but is not the root")))
                }
                Some(p) if *p >= j => {
                    return Err(Error::Invalid(format!("joint {idx} has out-of-range parent {p}")))
                }
                _ => {}
            }
        }
        // Every chain of parents must reach the root without revisiting a joint.
        for start in 0..j {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = self.parents[cur] {
                cur = p;
                hops += 1;
                if hops > j {
                    return Err(Error::Invalid(format!("cycle through joint {start}")));
                }
            }
            if cur != self.root {
                return Err(Error::Invalid(format!("joint {start} is not connected to the root")));
            }
        }
        if let Some(bad) = self.contact_joints.iter().find(|&&c| c >= j || c == self.root) {
            return Err(Error::Invalid(format!("contact joint {bad} out of range")));
        }
        Ok(())
    }
}
