//! Procedural biped motion: walking, waving, jumping and reaching.
//!
//! Joint angles follow simple periodic schedules; world positions always come
//! from forward kinematics and the root height keeps the lowest foot on the
//! floor (plus the ballistic lift while jumping).

use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_y, rot_z, Rotation, Vec3};
use crate::motion::{Frame, MotionClip, FPS};
use crate::skeleton::{joint, Skeleton, BIPED_B};

const GRAVITY: f64 = 9.81;
/// Knee bend (rad) at full crouch.
const MAX_CROUCH_BEND: f64 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Walk,
    Wave,
    Jump,
    Reach,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [MotionKind::Walk, MotionKind::Wave, MotionKind::Jump, MotionKind::Reach];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Both,
}

impl Side {
    fn left(self) -> bool {
        matches!(self, Side::Left | Side::Both)
    }

    fn right(self) -> bool {
        matches!(self, Side::Right | Side::Both)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Root ground speed in m/s, 0..=2 (walk and jump).
    pub speed: f64,
    /// Swing amplitude scale in rad, 0..=1.
    pub amplitude: f64,
    /// Fraction of full knee bend, 0..=1.
    pub crouch: f64,
    /// Apex of the ballistic flight in meters, 0..=1.
    pub jump_height: f64,
    /// Initial heading in rad.
    pub heading: f64,
    /// Yaw rate in rad/s, -1..=1.
    pub turn_rate: f64,
    /// Cycle frequency in Hz for wave, jump and reach, 0.2..=3.
    pub frequency: f64,
    /// Initial cycle phase in rad.
    pub phase: f64,
    pub side: Side,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            speed: 0.0,
            amplitude: 0.5,
            crouch: 0.0,
            jump_height: 0.0,
            heading: 0.0,
            turn_rate: 0.0,
            frequency: 1.0,
            phase: 0.0,
            side: Side::Left,
        }
    }
}

fn check(name: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<()> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(Error::Range { name, value, range })
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        check("speed", self.speed, 0.0, 2.0, "[0, 2] m/s")?;
        check("amplitude", self.amplitude, 0.0, 1.0, "[0, 1] rad")?;
        check("crouch", self.crouch, 0.0, 1.0, "[0, 1]")?;
        check("jump_height", self.jump_height, 0.0, 1.0, "[0, 1] m")?;
        check("turn_rate", self.turn_rate, -1.0, 1.0, "[-1, 1] rad/s")?;
        check("frequency", self.frequency, 0.2, 3.0, "[0.2, 3] Hz")?;
        check("heading", self.heading, -1e3, 1e3, "finite")?;
        check("phase", self.phase, -1e3, 1e3, "finite")?;
        Ok(())
    }
}

/// Per-character ranges the dataset sampler draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub speed: (f64, f64),
    pub crouch: (f64, f64),
    pub jump_height: (f64, f64),
    /// Relative frequency of each entry of [`MotionKind::ALL`].
    pub kind_weights: [f64; 4],
}

impl Profile {
    /// The large biped is always somewhat crouched and the small one jumps
    /// often and high, so the two root-height distributions overlap in
    /// absolute meters (see `pilots/flow.log`).
    pub fn for_skeleton(id: &str) -> Profile {
        if id == BIPED_B {
            Profile {
                speed: (0.0, 0.8),
                crouch: (0.0, 0.5),
                jump_height: (0.4, 1.0),
                kind_weights: [1.0, 1.0, 2.0, 1.0],
            }
        } else {
            Profile {
                speed: (0.0, 1.6),
                crouch: (0.5, 1.0),
                jump_height: (0.0, 0.15),
                kind_weights: [1.0; 4],
            }
        }
    }

    pub fn sample(&self, kind: MotionKind, rng: &mut impl Rng) -> SynthParams {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let moving = matches!(kind, MotionKind::Walk | MotionKind::Jump);
        let speed = u(rng, self.speed);
        SynthParams {
            speed: if moving { speed } else { 0.0 },
            amplitude: u(rng, (0.2, 1.0)),
            crouch: u(rng, self.crouch),
            jump_height: u(rng, self.jump_height),
            heading: u(rng, (-0.5, 0.5)),
            turn_rate: u(rng, (-0.3, 0.3)),
            frequency: u(rng, (0.5, 1.3)),
            phase: u(rng, (0.0, TAU)),
            side: [Side::Left, Side::Right, Side::Both][rng.random_range(0..3)],
        }
    }
}

/// Draws a kind and its parameters from `profile` and generates the clip.
pub fn random_clip(skel: &Skeleton, profile: &Profile, frames: usize, rng: &mut impl Rng) -> Result<MotionClip> {
    let total: f64 = profile.kind_weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut kind = MotionKind::ALL[3];
    for (k, w) in MotionKind::ALL.iter().zip(profile.kind_weights) {
        if u < w {
            kind = *k;
            break;
        }
        u -= w;
    }
    let params = profile.sample(kind, rng);
    generate(kind, skel, &params, frames)
}

/// `clips` random clips of `frames` frames for `skel`, from the stream
/// `data/<id>` of `seed`.
pub fn corpus(skel: &Skeleton, clips: usize, frames: usize, seed: u64) -> Result<Vec<MotionClip>> {
    let profile = Profile::for_skeleton(&skel.id);
    let mut rng = crate::rng::stream(seed, &format!("data/{}", skel.id));
    (0..clips).map(|_| random_clip(skel, &profile, frames, &mut rng)).collect()
}

/// World positions and rotations from root placement and local joint
/// rotations: `R_i = R_parent * L_i`, `p_i = p_parent + R_parent * offset_i`.
pub fn forward_kinematics(skel: &Skeleton, root: Vec3, locals: &[Rotation]) -> (Vec<Vec3>, Vec<Rotation>) {
    let n = skel.num_joints();
    let mut pos = Vec::with_capacity(n);
    let mut rot: Vec<Rotation> = Vec::with_capacity(n);
    for (i, j) in skel.joints.iter().enumerate() {
        match j.parent {
            None => {
                pos.push(root);
                rot.push(locals[i]);
            }
            Some(p) => {
                let pp = pos[p];
                let rp = rot[p];
                pos.push(pp + rp * j.offset);
                rot.push(rp * locals[i]);
            }
        }
    }
    (pos, rot)
}

/// Joint angles of one frame before the root height is known.
struct Pose {
    xy: [f64; 2],
    locals: Vec<Rotation>,
    lift: f64,
}

fn leg_pose(locals: &mut [Rotation], hip: usize, knee: usize, hip_pitch: f64, bend: f64) {
    locals[hip] = rot_y(hip_pitch);
    locals[knee] = rot_y(bend);
}

fn arm_pose(locals: &mut [Rotation], shoulder: usize, pitch: f64, roll: f64) {
    locals[shoulder] = rot_y(pitch) * rot_x(roll);
}

/// Ground-plane root position after `t` seconds of constant speed and yaw rate.
fn planar_path(p: &SynthParams, t: f64) -> [f64; 2] {
    let w = p.turn_rate;
    if w.abs() < 1e-12 {
        [p.speed * t * p.heading.cos(), p.speed * t * p.heading.sin()]
    } else {
        let a = p.heading + w * t;
        [
            p.speed / w * (a.sin() - p.heading.sin()),
            p.speed / w * (p.heading.cos() - a.cos()),
        ]
    }
}

fn pose(kind: MotionKind, skel: &Skeleton, p: &SynthParams, t: f64) -> Pose {
    use joint::*;
    let mut locals = vec![Rotation::identity(); skel.num_joints()];
    let bend0 = p.crouch * MAX_CROUCH_BEND;
    let yaw = p.heading + p.turn_rate * t;
    let mut xy = [0.0, 0.0];
    let mut lift = 0.0;
    let cycle = TAU * p.frequency * t + p.phase;
    let a = p.amplitude;
    let side_weights = |s: Side| (if s.left() { 1.0 } else { 0.0 }, if s.right() { 1.0 } else { 0.0 });

    match kind {
        MotionKind::Walk => {
            let leg = skel.end_effectors.iter().find(|e| e.joint == L_FOOT).map_or(0.9, |e| e.length);
            let cadence = p.speed / (1.4 * leg);
            let phi = p.phase + TAU * cadence * t;
            xy = planar_path(p, t);
            let (hs, ks, ss) = (0.5 * a, 0.8 * a, 0.4 * a);
            let swing_l = phi.cos().max(0.0).powi(2);
            let swing_r = (-phi.cos()).max(0.0).powi(2);
            leg_pose(&mut locals, L_HIP, L_KNEE, -0.5 * bend0 - hs * phi.sin(), bend0 + ks * swing_l);
            leg_pose(&mut locals, R_HIP, R_KNEE, -0.5 * bend0 + hs * phi.sin(), bend0 + ks * swing_r);
            arm_pose(&mut locals, L_SHOULDER, ss * phi.sin(), 0.1);
            arm_pose(&mut locals, R_SHOULDER, -ss * phi.sin(), -0.1);
        }
        MotionKind::Wave => {
            let (l, r) = side_weights(p.side);
            let raised = 2.4 + 0.4 * a * cycle.sin();
            leg_pose(&mut locals, L_HIP, L_KNEE, -0.5 * bend0, bend0);
            leg_pose(&mut locals, R_HIP, R_KNEE, -0.5 * bend0, bend0);
            arm_pose(&mut locals, L_SHOULDER, 0.05 * cycle.cos(), l * raised + (1.0 - l) * 0.1);
            arm_pose(&mut locals, R_SHOULDER, 0.05 * cycle.cos(), -(r * raised + (1.0 - r) * 0.1));
        }
        MotionKind::Jump => {
            xy = planar_path(p, t);
            let period = 1.0 / p.frequency;
            let flight = (2.0 * (2.0 * p.jump_height / GRAVITY).sqrt()).min(0.6 * period);
            let rho = flight / period;
            let s = (cycle / TAU).rem_euclid(1.0);
            let (dip, up) = if s < 1.0 - rho {
                ((PI * s / (1.0 - rho)).sin().powi(2), 0.0)
            } else {
                let tau = (s - (1.0 - rho)) * period;
                let u = tau / flight;
                lift = 4.0 * p.jump_height * u * (1.0 - u);
                (0.0, (PI * u).sin())
            };
            let bend = bend0 + (0.6 + 0.6 * a) * dip + 0.3 * up;
            leg_pose(&mut locals, L_HIP, L_KNEE, -0.5 * bend, bend);
            leg_pose(&mut locals, R_HIP, R_KNEE, -0.5 * bend, bend);
            let arm = 0.6 * dip - 1.5 * a * up;
            arm_pose(&mut locals, L_SHOULDER, arm, 0.1);
            arm_pose(&mut locals, R_SHOULDER, arm, -0.1);
        }
        MotionKind::Reach => {
            let (l, r) = side_weights(p.side);
            let u = 0.5 - 0.5 * cycle.cos();
            let bend = bend0 * u;
            leg_pose(&mut locals, L_HIP, L_KNEE, -0.5 * bend, bend);
            leg_pose(&mut locals, R_HIP, R_KNEE, -0.5 * bend, bend);
            let reach = -(0.6 + 1.8 * a) * u;
            arm_pose(&mut locals, L_SHOULDER, l * reach, 0.1);
            arm_pose(&mut locals, R_SHOULDER, r * reach, -0.1);
        }
    }
    locals[ROOT] = rot_z(yaw);
    Pose { xy, locals, lift }
}

/// Height of the root above the lowest foot for a pose.
fn leg_extent(skel: &Skeleton, locals: &[Rotation]) -> f64 {
    let (pos, _) = forward_kinematics(skel, Vec3::zeros(), locals);
    skel.feet().iter().map(|&f| -pos[f].z).fold(f64::NEG_INFINITY, f64::max)
}

/// Generates `frames` frames at [`FPS`]. Walking keeps a constant root height
/// (the tallest leg extent over the clip); the other kinds track the extent
/// frame by frame.
pub fn generate(kind: MotionKind, skel: &Skeleton, params: &SynthParams, frames: usize) -> Result<MotionClip> {
    params.validate()?;
    if skel.num_joints() != joint::COUNT {
        return Err(Error::Mismatch(format!(
            "generator drives {} joints, skeleton {} has {}",
            joint::COUNT,
            skel.id,
            skel.num_joints()
        )));
    }
    let poses: Vec<Pose> = (0..frames).map(|t| pose(kind, skel, params, t as f64 / FPS)).collect();
    let extents: Vec<f64> = poses.iter().map(|p| leg_extent(skel, &p.locals)).collect();
    let walk_height = extents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut clip = MotionClip {
        skeleton: skel.id.clone(),
        fps: FPS,
        frames: Vec::with_capacity(frames),
    };
    for (pose, ext) in poses.iter().zip(&extents) {
        let height = match kind {
            MotionKind::Walk => walk_height,
            _ => *ext,
        };
        let root = Vec3::new(pose.xy[0], pose.xy[1], skel.floor + height + pose.lift);
        let (positions, rotations) = forward_kinematics(skel, root, &pose.locals);
        clip.frames.push(Frame {
            positions,
            rotations,
            v_root: Vec3::zeros(),
        });
    }
    clip.recompute_root_velocity();
    Ok(clip)
}
