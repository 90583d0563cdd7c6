use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Bone offset from the parent, in the parent's frame (meters).
    pub offset: Vec3,
}

/// An end effector `joint` measured relative to `anchor`, e.g. hand to shoulder.
#[derive(Clone, Debug, PartialEq)]
pub struct EndEffector {
    /// Limb name used in condition tags (`left-arm`, ...).
    pub limb: String,
    pub joint: usize,
    pub anchor: usize,
    /// Rest-pose chain length from anchor to effector.
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub id: String,
    pub joints: Vec<Joint>,
    pub end_effectors: Vec<EndEffector>,
    pub floor: f64,
}

pub const BIPED_A: &str = "biped-A";
pub const BIPED_B: &str = "biped-B";

pub mod joint {
    pub const ROOT: usize = 0;
    pub const L_HIP: usize = 1;
    pub const L_KNEE: usize = 2;
    pub const L_FOOT: usize = 3;
    pub const R_HIP: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const R_FOOT: usize = 6;
    pub const L_SHOULDER: usize = 7;
    pub const L_HAND: usize = 8;
    pub const R_SHOULDER: usize = 9;
    pub const R_HAND: usize = 10;
    pub const COUNT: usize = 11;
}

impl Skeleton {
    /// Builds a skeleton and derives limb lengths from the rest offsets.
    pub fn new(
        id: impl Into<String>,
        joints: Vec<Joint>,
        limbs: &[(&str, usize, usize)],
        floor: f64,
    ) -> Result<Self> {
        if joints.is_empty() || joints[0].parent.is_some() {
            return Err(Error::Mismatch("joint 0 must be the root".into()));
        }
        for (i, j) in joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => return Err(Error::Mismatch(format!("joint {} has no earlier parent", j.name))),
            }
        }
        let mut skel = Skeleton {
            id: id.into(),
            joints,
            end_effectors: Vec::new(),
            floor,
        };
        for &(limb, anchor, joint) in limbs {
            let length = skel.chain_length(anchor, joint)?;
            if length <= 0.0 {
                return Err(Error::Range {
                    name: "limb length",
                    value: length,
                    range: "(0, inf)",
                });
            }
            skel.end_effectors.push(EndEffector {
                limb: limb.to_string(),
                joint,
                anchor,
                length,
            });
        }
        Ok(skel)
    }

    fn chain_length(&self, anchor: usize, joint: usize) -> Result<f64> {
        let mut len = 0.0;
        let mut j = joint;
        while j != anchor {
            let parent = self.joints[j]
                .parent
                .ok_or_else(|| Error::UnknownJoint(format!("{} is not above {}", anchor, joint)))?;
            len += self.joints[j].offset.norm();
            j = parent;
        }
        Ok(len)
    }

    /// The two built-in characters.
    pub fn builtin(id: &str) -> Result<Self> {
        match id {
            BIPED_A => Ok(biped(BIPED_A, 1.0, 1.0)),
            BIPED_B => Ok(biped(BIPED_B, 0.5, 1.2)),
            other => Err(Error::UnknownSkeleton(other.to_string())),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Channels per frame: positions, 3x3 rotations, root velocity.
    pub fn frame_channels(&self) -> usize {
        self.joints.len() * 12 + 3
    }

    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.joints
            .iter()
            .position(|j| j.name == name)
            .ok_or_else(|| Error::UnknownJoint(name.to_string()))
    }

    /// Resolves limb names to end-effector indices in declaration order.
    /// An empty selection means every end effector.
    pub fn select_limbs(&self, limbs: &[String]) -> Result<Vec<usize>> {
        for l in limbs {
            if !self.end_effectors.iter().any(|e| &e.limb == l) {
                return Err(Error::UnknownJoint(l.clone()));
            }
        }
        Ok((0..self.end_effectors.len())
            .filter(|&i| limbs.is_empty() || limbs.contains(&self.end_effectors[i].limb))
            .collect())
    }

    /// Leg end effectors, used as feet by the naturalness checks.
    pub fn feet(&self) -> Vec<usize> {
        self.end_effectors
            .iter()
            .filter(|e| e.limb.ends_with("leg"))
            .map(|e| e.joint)
            .collect()
    }

    /// Same topology with every offset and the floor height multiplied by
    /// `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Range {
                name: "scale factor",
                value: factor,
                range: "(0, inf)",
            });
        }
        let mut s = self.clone();
        for j in &mut s.joints {
            j.offset *= factor;
        }
        for e in &mut s.end_effectors {
            e.length *= factor;
        }
        s.floor *= factor;
        Ok(s)
    }
}

/// Pelvis-rooted biped, x forward, y left, z up. `arm` stretches the
/// shoulder-to-hand bone on top of the uniform `scale`.
fn biped(id: &str, scale: f64, arm: f64) -> Skeleton {
    use joint::*;
    let j = |name: &str, parent: Option<usize>, x: f64, y: f64, z: f64| Joint {
        name: name.to_string(),
        parent,
        offset: Vec3::new(x, y, z) * scale,
    };
    let joints = vec![
        j("root", None, 0.0, 0.0, 0.0),
        j("l_hip", Some(ROOT), 0.0, 0.1, 0.0),
        j("l_knee", Some(L_HIP), 0.0, 0.0, -0.45),
        j("l_foot", Some(L_KNEE), 0.0, 0.0, -0.45),
        j("r_hip", Some(ROOT), 0.0, -0.1, 0.0),
        j("r_knee", Some(R_HIP), 0.0, 0.0, -0.45),
        j("r_foot", Some(R_KNEE), 0.0, 0.0, -0.45),
        j("l_shoulder", Some(ROOT), 0.0, 0.2, 0.5),
        j("l_hand", Some(L_SHOULDER), 0.0, 0.0, -0.55 * arm),
        j("r_shoulder", Some(ROOT), 0.0, -0.2, 0.5),
        j("r_hand", Some(R_SHOULDER), 0.0, 0.0, -0.55 * arm),
    ];
    let limbs = [
        ("left-arm", L_SHOULDER, L_HAND),
        ("right-arm", R_SHOULDER, R_HAND),
        ("left-leg", L_HIP, L_FOOT),
        ("right-leg", R_HIP, R_FOOT),
    ];
    Skeleton::new(id, joints, &limbs, 0.0).expect("built-in skeleton is well formed")
}
