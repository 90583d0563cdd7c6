//! Frames, clips, fixed-length windows and per-channel normalization.

use crate::error::{Error, Result};
use crate::geometry::{project_to_so3, Rotation, Vec3};
use crate::skeleton::Skeleton;

/// Frame rate of every clip in the pipeline; a 32-frame window is one second.
pub const FPS: f64 = 32.0;

/// Smallest per-channel standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// World positions, one per joint.
    pub positions: Vec<Vec3>,
    /// World orientations, one per joint; index 0 is the root.
    pub rotations: Vec<Rotation>,
    pub v_root: Vec3,
}

impl Frame {
    pub fn root(&self) -> Vec3 {
        self.positions[0]
    }

    /// Appends the frame in channel order: positions, row-major rotations,
    /// root velocity.
    pub fn write_channels(&self, out: &mut Vec<f64>) {
        for p in &self.positions {
            out.extend_from_slice(p.as_slice());
        }
        for r in &self.rotations {
            for i in 0..3 {
                for j in 0..3 {
                    out.push(r[(i, j)]);
                }
            }
        }
        out.extend_from_slice(self.v_root.as_slice());
    }

    /// Inverse of [`Frame::write_channels`]; rotations are projected onto
    /// SO(3) when `project` is set and taken verbatim otherwise.
    pub fn from_channels(c: &[f64], joints: usize, project: bool) -> Result<Frame> {
        if c.len() != joints * 12 + 3 {
            return Err(Error::Mismatch(format!(
                "frame has {} channels, expected {}",
                c.len(),
                joints * 12 + 3
            )));
        }
        let positions = (0..joints)
            .map(|j| Vec3::new(c[3 * j], c[3 * j + 1], c[3 * j + 2]))
            .collect();
        let base = 3 * joints;
        let rotations = (0..joints)
            .map(|j| {
                let r = Rotation::from_row_slice(&c[base + 9 * j..base + 9 * j + 9]);
                if project {
                    project_to_so3(&r)
                } else {
                    r
                }
            })
            .collect();
        let v = &c[12 * joints..];
        Ok(Frame {
            positions,
            rotations,
            v_root: Vec3::new(v[0], v[1], v[2]),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub skeleton: String,
    pub fps: f64,
    pub frames: Vec<Frame>,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Largest violation of `child = parent + R_parent * offset`.
    pub fn fk_residual(&self, skel: &Skeleton) -> f64 {
        let mut worst: f64 = 0.0;
        for f in &self.frames {
            for (i, j) in skel.joints.iter().enumerate() {
                if let Some(p) = j.parent {
                    let expect = f.positions[p] + f.rotations[p] * j.offset;
                    worst = worst.max((f.positions[i] - expect).abs().max());
                }
            }
        }
        worst
    }

    /// Rebuilds `v_root` as the forward difference of root positions; the
    /// last frame reuses the preceding difference.
    pub fn recompute_root_velocity(&mut self) {
        let n = self.frames.len();
        if n < 2 {
            for f in &mut self.frames {
                f.v_root = Vec3::zeros();
            }
            return;
        }
        for t in 0..n - 1 {
            let v = (self.frames[t + 1].root() - self.frames[t].root()) * self.fps;
            self.frames[t].v_root = v;
        }
        self.frames[n - 1].v_root = self.frames[n - 2].v_root;
    }

    /// Rigid translation of every joint; velocities are unchanged.
    pub fn translated(&self, d: &Vec3) -> MotionClip {
        let mut c = self.clone();
        for f in &mut c.frames {
            for p in &mut f.positions {
                *p += d;
            }
        }
        c
    }
}

/// Scales a character and one of its clips: positions, limb lengths and root
/// velocity by `factor`, rotations unchanged.
pub fn scale_character(skel: &Skeleton, clip: &MotionClip, factor: f64) -> Result<(Skeleton, MotionClip)> {
    let s = skel.scaled(factor)?;
    let mut c = clip.clone();
    for f in &mut c.frames {
        for p in &mut f.positions {
            *p *= factor;
        }
        f.v_root *= factor;
    }
    Ok((s, c))
}

/// `H` consecutive frames of a clip. Positions are stored with the root's
/// ground-plane position at the window start (`origin`) subtracted, so the
/// representation does not depend on where in the world the window happens.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionWindow {
    pub start: usize,
    pub origin: [f64; 2],
    pub frames: Vec<Frame>,
}

impl MotionWindow {
    pub fn from_clip(clip: &MotionClip, start: usize, h: usize) -> MotionWindow {
        let r0 = clip.frames[start].root();
        let origin = [r0.x, r0.y];
        let frames = clip.frames[start..start + h]
            .iter()
            .map(|f| {
                let mut f = f.clone();
                for p in &mut f.positions {
                    p.x -= origin[0];
                    p.y -= origin[1];
                }
                f
            })
            .collect();
        MotionWindow { start, origin, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame-major flat channel vector.
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in &self.frames {
            f.write_channels(&mut out);
        }
        out
    }

    /// Rebuilds a window from flat channels, projecting rotations to SO(3).
    pub fn from_channels(data: &[f64], joints: usize, start: usize, origin: [f64; 2]) -> Result<Self> {
        let c = joints * 12 + 3;
        if data.is_empty() || data.len() % c != 0 {
            return Err(Error::Mismatch(format!(
                "{} values do not split into frames of {c} channels",
                data.len()
            )));
        }
        let frames = data
            .chunks(c)
            .map(|f| Frame::from_channels(f, joints, true))
            .collect::<Result<_>>()?;
        Ok(MotionWindow { start, origin, frames })
    }

    /// Frames with the origin added back.
    pub fn world_frames(&self) -> Vec<Frame> {
        self.frames
            .iter()
            .map(|f| {
                let mut f = f.clone();
                for p in &mut f.positions {
                    p.x += self.origin[0];
                    p.y += self.origin[1];
                }
                f
            })
            .collect()
    }
}

/// `⌊(T − H) / stride⌋ + 1` for `T ≥ H`, else 0.
pub fn window_count(frames: usize, h: usize, stride: usize) -> usize {
    if frames < h || h == 0 || stride == 0 {
        0
    } else {
        (frames - h) / stride + 1
    }
}

pub fn extract_windows(clip: &MotionClip, h: usize, stride: usize) -> Vec<MotionWindow> {
    let n = window_count(clip.len(), h, stride);
    if n == 0 {
        log::warn!("clip of {} frames yields no {h}-frame windows", clip.len());
    }
    (0..n).map(|i| MotionWindow::from_clip(clip, i * stride, h)).collect()
}

/// Per-channel mean and standard deviation of one frame's channels.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over every frame of `windows`.
    pub fn compute<'a>(channels: usize, windows: impl IntoIterator<Item = &'a MotionWindow>) -> Result<Self> {
        let mut acc = NormAccumulator::new(channels);
        for w in windows {
            acc.add(w)?;
        }
        acc.finish()
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if self.mean.is_empty() || x.len() % self.mean.len() != 0 {
            return Err(Error::Mismatch(format!(
                "{} values are not whole frames of {} channels",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let c = self.mean.len();
        Ok(x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect())
    }

    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let c = self.mean.len();
        Ok(x.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect())
    }
}

/// A character's clips indexed lazily by `(clip, start)` window.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub clips: Vec<MotionClip>,
    pub window: usize,
    pub stride: usize,
    index: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(skeleton: Skeleton, clips: Vec<MotionClip>, window: usize, stride: usize) -> Result<Self> {
        let mut index = Vec::new();
        for (ci, c) in clips.iter().enumerate() {
            if c.skeleton != skeleton.id {
                return Err(Error::Mismatch(format!(
                    "clip {ci} is for {}, dataset is {}",
                    c.skeleton, skeleton.id
                )));
            }
            let n = window_count(c.len(), window, stride);
            if n == 0 {
                log::warn!("clip {ci} is shorter than the {window}-frame window");
            }
            index.extend((0..n).map(|i| (ci, i * stride)));
        }
        Ok(Dataset {
            skeleton,
            clips,
            window,
            stride,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn window(&self, i: usize) -> MotionWindow {
        let (c, s) = self.index[i];
        MotionWindow::from_clip(&self.clips[c], s, self.window)
    }

    pub fn windows(&self) -> impl Iterator<Item = MotionWindow> + '_ {
        (0..self.len()).map(|i| self.window(i))
    }

    pub fn stats(&self) -> Result<NormStats> {
        let c = self.skeleton.frame_channels();
        let mut sum = NormAccumulator::new(c);
        for w in self.windows() {
            sum.add(&w)?;
        }
        sum.finish()
    }

    /// Holds out the last `ceil(fraction * clips)` clips (at least one when
    /// there are two or more clips).
    pub fn split(self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let n = self.clips.len();
        let mut k = (fraction * n as f64).ceil() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = 0;
        }
        let mut clips = self.clips;
        let held = clips.split_off(n - k);
        Ok((
            Dataset::new(self.skeleton.clone(), clips, self.window, self.stride)?,
            Dataset::new(self.skeleton, held, self.window, self.stride)?,
        ))
    }
}

/// Streaming version of [`NormStats::compute`].
struct NormAccumulator {
    sum: Vec<f64>,
    sq: Vec<f64>,
    n: usize,
    buf: Vec<f64>,
}

impl NormAccumulator {
    fn new(c: usize) -> Self {
        NormAccumulator {
            sum: vec![0.0; c],
            sq: vec![0.0; c],
            n: 0,
            buf: Vec::with_capacity(c),
        }
    }

    fn add(&mut self, w: &MotionWindow) -> Result<()> {
        for f in &w.frames {
            self.buf.clear();
            f.write_channels(&mut self.buf);
            if self.buf.len() != self.sum.len() {
                return Err(Error::Mismatch(format!(
                    "frame has {} channels, stats expect {}",
                    self.buf.len(),
                    self.sum.len()
                )));
            }
            for (i, v) in self.buf.iter().enumerate() {
                self.sum[i] += v;
                self.sq[i] += v * v;
            }
            self.n += 1;
        }
        Ok(())
    }

    fn finish(self) -> Result<NormStats> {
        if self.n == 0 {
            return Err(Error::EmptyBatch);
        }
        let nf = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let std = self
            .sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }
}
