//! Condition vocabulary and the window-level feature extractors Φ(·, c).
//!
//! Every extractor averages a per-frame descriptor over the window. Velocity
//! descriptors use forward differences, so a window of `T` frames has `T − 1`
//! of them; the last frame reuses the preceding difference so that the average
//! still runs over `T` terms.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{so3_log_vee, to_local, wrap_angle, yaw, Rotation, Vec3};
use crate::motion::{Frame, FPS};
use crate::skeleton::Skeleton;

/// Added to limb lengths before dividing.
pub const LIMB_EPS: f64 = 1e-12;
pub const DT: f64 = 1.0 / FPS;
/// Step of the central difference used for the rotation-log gradient.
const LOG_FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    RootVelocity,
    Root2d,
    LocalEe,
    WorldXyzEe,
    WorldXyRoot,
    WorldZ,
    Null,
}

impl Tag {
    pub const FEATURED: [Tag; 6] = [
        Tag::RootVelocity,
        Tag::Root2d,
        Tag::LocalEe,
        Tag::WorldXyzEe,
        Tag::WorldXyRoot,
        Tag::WorldZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::RootVelocity => "root-velocity",
            Tag::Root2d => "root-2d",
            Tag::LocalEe => "local-ee",
            Tag::WorldXyzEe => "world-xyz-ee",
            Tag::WorldXyRoot => "world-xy-root",
            Tag::WorldZ => "world-z",
            Tag::Null => "null",
        }
    }

    fn takes_limbs(self) -> bool {
        matches!(self, Tag::LocalEe | Tag::WorldXyzEe)
    }
}

/// A condition tag plus, for end-effector tags, the limbs it covers (empty
/// means all of them).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Condition {
    pub tag: Tag,
    pub limbs: Vec<String>,
}

impl Condition {
    pub fn new(tag: Tag) -> Self {
        Condition { tag, limbs: Vec::new() }
    }

    pub fn null() -> Self {
        Condition::new(Tag::Null)
    }

    pub fn is_null(&self) -> bool {
        self.tag == Tag::Null
    }

    /// Feature length for `skel`.
    pub fn dim(&self, skel: &Skeleton) -> Result<usize> {
        Ok(match self.tag {
            Tag::RootVelocity => 6,
            Tag::Root2d => 3,
            Tag::LocalEe | Tag::WorldXyzEe => 3 * skel.select_limbs(&self.limbs)?.len(),
            Tag::WorldXyRoot => 2,
            Tag::WorldZ => 1,
            Tag::Null => return Err(Error::NullCondition),
        })
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag.name())?;
        if !self.limbs.is_empty() {
            write!(f, ":{}", self.limbs.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// `world-z`, `local-ee`, `local-ee:left-arm,right-arm`, `null`, ...
    fn from_str(s: &str) -> Result<Self> {
        let (name, limbs) = match s.split_once(':') {
            Some((n, l)) => (n, Some(l)),
            None => (s, None),
        };
        let tag = Tag::FEATURED
            .iter()
            .chain(&[Tag::Null])
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::UnknownCondition(s.to_string()))?;
        let limbs: Vec<String> = match limbs {
            None => Vec::new(),
            Some(_) if !tag.takes_limbs() => return Err(Error::UnknownCondition(s.to_string())),
            Some(l) => l.split(',').map(str::to_string).collect(),
        };
        for (i, l) in limbs.iter().enumerate() {
            let valid = !l.is_empty() && l.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
            if !valid || limbs[..i].contains(l) {
                return Err(Error::UnknownCondition(s.to_string()));
            }
        }
        Ok(Condition { tag, limbs })
    }
}

/// The conditions a flow model is trained with; position in the list is the
/// one-hot index. The null condition is not a member and encodes as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub conditions: Vec<Condition>,
}

impl ConditionSet {
    pub fn new(conditions: Vec<Condition>) -> Result<Self> {
        if conditions.is_empty() {
            return Err(Error::Config("condition set is empty".into()));
        }
        for (i, c) in conditions.iter().enumerate() {
            if c.is_null() || conditions[..i].contains(c) {
                return Err(Error::Config(format!("condition set entry `{c}` is null or repeated")));
            }
        }
        Ok(ConditionSet { conditions })
    }

    /// Every featured tag with all limbs.
    pub fn all() -> Self {
        ConditionSet {
            conditions: Tag::FEATURED.iter().map(|t| Condition::new(*t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// `None` for the null condition.
    pub fn index(&self, c: &Condition) -> Result<Option<usize>> {
        if c.is_null() {
            return Ok(None);
        }
        self.conditions
            .iter()
            .position(|x| x == c)
            .map(Some)
            .ok_or_else(|| Error::UnknownCondition(format!("{c} (not in the model's condition set)")))
    }

    pub fn one_hot(&self, c: &Condition) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.len()];
        if let Some(i) = self.index(c)? {
            v[i] = 1.0;
        }
        Ok(v)
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        let conditions = s
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<Condition>>>()?;
        ConditionSet::new(conditions)
    }
}

impl fmt::Display for ConditionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.conditions.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Weight of difference `t` (between frames `t` and `t + 1`) in the window
/// average: the last difference also stands in for the final frame.
fn diff_weights(frames: usize) -> Result<Vec<f64>> {
    if frames < 2 {
        return Err(Error::Mismatch(format!("velocity features need 2 frames, window has {frames}")));
    }
    let inv = 1.0 / frames as f64;
    let mut w = vec![inv; frames - 1];
    w[frames - 2] += inv;
    Ok(w)
}

fn root_linear_velocity(frames: &[Frame], t: usize) -> Vec3 {
    to_local(&frames[t].rotations[0], &(frames[t + 1].root() - frames[t].root())) / DT
}

fn root_angular_velocity(frames: &[Frame], t: usize) -> Vec3 {
    let m = frames[t].rotations[0].transpose() * frames[t + 1].rotations[0];
    so3_log_vee(&m) / DT
}

pub fn phi_root_velocity(frames: &[Frame]) -> Result<Vec<f64>> {
    let w = diff_weights(frames.len())?;
    let mut f = [0.0; 6];
    for (t, wt) in w.iter().enumerate() {
        let v = root_linear_velocity(frames, t);
        let o = root_angular_velocity(frames, t);
        for k in 0..3 {
            f[k] += wt * v[k];
            f[3 + k] += wt * o[k];
        }
    }
    Ok(f.to_vec())
}

pub fn phi_root_2d(frames: &[Frame]) -> Result<Vec<f64>> {
    let w = diff_weights(frames.len())?;
    let mut f = [0.0; 3];
    for (t, wt) in w.iter().enumerate() {
        let v = root_linear_velocity(frames, t);
        let dpsi = wrap_angle(yaw(&frames[t + 1].rotations[0]) - yaw(&frames[t].rotations[0])) / DT;
        f[0] += wt * v.x;
        f[1] += wt * v.y;
        f[2] += wt * dpsi;
    }
    Ok(f.to_vec())
}

pub fn phi_local_ee(frames: &[Frame], skel: &Skeleton, limbs: &[String]) -> Result<Vec<f64>> {
    let sel = skel.select_limbs(limbs)?;
    let inv = 1.0 / frames.len().max(1) as f64;
    let mut f = vec![0.0; 3 * sel.len()];
    for fr in frames {
        let r = &fr.rotations[0];
        for (k, &e) in sel.iter().enumerate() {
            let ee = &skel.end_effectors[e];
            let rel = to_local(r, &(fr.positions[ee.joint] - fr.positions[ee.anchor])) / (ee.length + LIMB_EPS);
            for i in 0..3 {
                f[3 * k + i] += inv * rel[i];
            }
        }
    }
    Ok(f)
}

pub fn phi_world_xyz_ee(frames: &[Frame], skel: &Skeleton, limbs: &[String]) -> Result<Vec<f64>> {
    let sel = skel.select_limbs(limbs)?;
    let inv = 1.0 / frames.len().max(1) as f64;
    let mut f = vec![0.0; 3 * sel.len()];
    for fr in frames {
        for (k, &e) in sel.iter().enumerate() {
            let p = fr.positions[skel.end_effectors[e].joint];
            for i in 0..3 {
                f[3 * k + i] += inv * p[i];
            }
        }
    }
    Ok(f)
}

/// Root ground-plane displacement from the first frame, averaged.
pub fn phi_world_xy_root(frames: &[Frame]) -> Result<Vec<f64>> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptyBatch);
    };
    let p0 = first.root();
    let inv = 1.0 / frames.len() as f64;
    let mut f = vec![0.0; 2];
    for fr in frames {
        f[0] += inv * (fr.root().x - p0.x);
        f[1] += inv * (fr.root().y - p0.y);
    }
    Ok(f)
}

pub fn phi_world_z(frames: &[Frame]) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / frames.len() as f64;
    Ok(vec![frames.iter().map(|f| inv * f.root().z).sum()])
}

/// Φ(frames, c). Errors for the null condition.
pub fn phi(frames: &[Frame], skel: &Skeleton, c: &Condition) -> Result<Vec<f64>> {
    match c.tag {
        Tag::RootVelocity => phi_root_velocity(frames),
        Tag::Root2d => phi_root_2d(frames),
        Tag::LocalEe => phi_local_ee(frames, skel, &c.limbs),
        Tag::WorldXyzEe => phi_world_xyz_ee(frames, skel, &c.limbs),
        Tag::WorldXyRoot => phi_world_xy_root(frames),
        Tag::WorldZ => phi_world_z(frames),
        Tag::Null => Err(Error::NullCondition),
    }
}

/// Gradient of `gᵀ Φ(frames, c)` with respect to the frames, laid out like
/// the frame-major channel vector (root-velocity channels get zero).
///
/// Positions and the rotation entries of linear terms are exact. The rotation
/// log map in the angular-velocity term is differentiated by central
/// differences on `R_tᵀ R_{t+1}`.
pub fn phi_vjp(frames: &[Frame], skel: &Skeleton, c: &Condition, g: &[f64]) -> Result<Vec<f64>> {
    let dim = c.dim(skel)?;
    if g.len() != dim {
        return Err(Error::Mismatch(format!("upstream gradient has {} entries, feature has {dim}", g.len())));
    }
    let nj = skel.num_joints();
    let ch = skel.frame_channels();
    let t_len = frames.len();
    let mut out = vec![0.0; t_len * ch];
    let pos = |t: usize, j: usize| t * ch + 3 * j;
    let rot = |t: usize, j: usize| t * ch + 3 * nj + 9 * j;
    let add_vec = |out: &mut [f64], at: usize, v: &Vec3| {
        for i in 0..3 {
            out[at + i] += v[i];
        }
    };
    let add_mat = |out: &mut [f64], at: usize, m: &Rotation| {
        for i in 0..3 {
            for j in 0..3 {
                out[at + 3 * i + j] += m[(i, j)];
            }
        }
    };

    match c.tag {
        Tag::RootVelocity | Tag::Root2d => {
            let w = diff_weights(t_len)?;
            let (g_lin, g_ang, g_yaw) = if c.tag == Tag::RootVelocity {
                (Vec3::new(g[0], g[1], g[2]), Some(Vec3::new(g[3], g[4], g[5])), 0.0)
            } else {
                (Vec3::new(g[0], g[1], 0.0), None, g[2])
            };
            for (t, wt) in w.iter().enumerate() {
                let s = wt / DT;
                let r = frames[t].rotations[0];
                let d = frames[t + 1].root() - frames[t].root();
                // v = Rᵀ d
                let gp = r * g_lin * s;
                add_vec(&mut out, pos(t + 1, 0), &gp);
                add_vec(&mut out, pos(t, 0), &(-gp));
                add_mat(&mut out, rot(t, 0), &(d * g_lin.transpose() * s));
                if let Some(ga) = g_ang {
                    let r1 = frames[t + 1].rotations[0];
                    let gm = log_grad(&(r.transpose() * r1), &ga) * s;
                    add_mat(&mut out, rot(t, 0), &(r1 * gm.transpose()));
                    add_mat(&mut out, rot(t + 1, 0), &(r * gm));
                }
                if g_yaw != 0.0 {
                    let gy = g_yaw * s;
                    add_mat(&mut out, rot(t + 1, 0), &(yaw_grad(&frames[t + 1].rotations[0]) * gy));
                    add_mat(&mut out, rot(t, 0), &(yaw_grad(&r) * -gy));
                }
            }
        }
        Tag::LocalEe => {
            let sel = skel.select_limbs(&c.limbs)?;
            let inv = 1.0 / t_len as f64;
            for (t, fr) in frames.iter().enumerate() {
                let r = fr.rotations[0];
                for (k, &e) in sel.iter().enumerate() {
                    let ee = &skel.end_effectors[e];
                    let s = inv / (ee.length + LIMB_EPS);
                    let gk = Vec3::new(g[3 * k], g[3 * k + 1], g[3 * k + 2]);
                    let d = fr.positions[ee.joint] - fr.positions[ee.anchor];
                    let gp = r * gk * s;
                    add_vec(&mut out, pos(t, ee.joint), &gp);
                    add_vec(&mut out, pos(t, ee.anchor), &(-gp));
                    add_mat(&mut out, rot(t, 0), &(d * gk.transpose() * s));
                }
            }
        }
        Tag::WorldXyzEe => {
            let sel = skel.select_limbs(&c.limbs)?;
            let inv = 1.0 / t_len as f64;
            for t in 0..t_len {
                for (k, &e) in sel.iter().enumerate() {
                    let gk = Vec3::new(g[3 * k], g[3 * k + 1], g[3 * k + 2]) * inv;
                    add_vec(&mut out, pos(t, skel.end_effectors[e].joint), &gk);
                }
            }
        }
        Tag::WorldXyRoot => {
            let inv = 1.0 / t_len as f64;
            let gv = Vec3::new(g[0], g[1], 0.0);
            for t in 0..t_len {
                add_vec(&mut out, pos(t, 0), &(gv * inv));
            }
            add_vec(&mut out, pos(0, 0), &(-gv));
        }
        Tag::WorldZ => {
            let inv = 1.0 / t_len as f64;
            for t in 0..t_len {
                out[pos(t, 0) + 2] += g[0] * inv;
            }
        }
        Tag::Null => return Err(Error::NullCondition),
    }
    Ok(out)
}

/// `∂(gᵀ vee(log M)) / ∂M` by central differences.
fn log_grad(m: &Rotation, g: &Vec3) -> Rotation {
    let mut out = Rotation::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut a = *m;
            a[(i, j)] += LOG_FD_STEP;
            let mut b = *m;
            b[(i, j)] -= LOG_FD_STEP;
            out[(i, j)] = g.dot(&(so3_log_vee(&a) - so3_log_vee(&b))) / (2.0 * LOG_FD_STEP);
        }
    }
    out
}

/// `∂ yaw(R) / ∂R` for `yaw = atan2(R₁₀, R₀₀)`.
fn yaw_grad(r: &Rotation) -> Rotation {
    let (c, s) = (r[(0, 0)], r[(1, 0)]);
    let n = (c * c + s * s).max(1e-300);
    let mut out = Rotation::zeros();
    out[(0, 0)] = -s / n;
    out[(1, 0)] = c / n;
    out
}

/// Feature vector used by FID and diversity: root velocity followed by
/// local end-effector positions of every limb.
pub fn metric_features(frames: &[Frame], skel: &Skeleton) -> Result<Vec<f64>> {
    let mut f = phi_root_velocity(frames)?;
    f.extend(phi_local_ee(frames, skel, &[])?);
    Ok(f)
}
