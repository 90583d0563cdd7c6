//! Inference: tokenize, transport through the flow, snap to the other
//! codebook and decode.

use std::thread;

use crate::error::{Error, Result};
use crate::features::Condition;
use crate::flow::{guided_velocity, FlowModel, VelocityField};
use crate::motion::{Frame, MotionClip, MotionWindow};
use crate::tokenizer::{Codebook, TokenSequence, Tokenizer};

/// Integrated embeddings beyond this magnitude are reported as diverged.
pub const Z_CAP: f64 = 1e6;
pub const DEFAULT_STEPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Source to target, `q` from 0 to 1.
    Forward,
    /// Target to source, `q` from 1 to 0.
    Reverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetargetRequest {
    pub condition: Condition,
    pub gamma: f64,
    pub steps: usize,
    pub direction: Direction,
}

impl RetargetRequest {
    pub fn new(condition: Condition, gamma: f64, steps: usize) -> Self {
        Self {
            condition,
            gamma,
            steps,
            direction: Direction::Forward,
        }
    }

    pub fn reversed(mut self) -> Self {
        self.direction = Direction::Reverse;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Range {
                name: "steps",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        if !self.gamma.is_finite() {
            return Err(Error::Range {
                name: "gamma",
                value: self.gamma,
                range: "finite",
            });
        }
        Ok(())
    }
}

/// Euler integration of the guided field over `q.len()` sequences at once,
/// with uniform steps. Forward runs `q = i/N` and adds; reverse runs
/// `q = 1 - i/N` and subtracts.
pub fn integrate(
    field: &dyn VelocityField,
    z0: &[f64],
    batch: usize,
    c: &Condition,
    gamma: f64,
    steps: usize,
    direction: Direction,
) -> Result<Vec<f64>> {
    if steps == 0 || batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let h = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    for i in 0..steps {
        let (q, sign) = match direction {
            Direction::Forward => (i as f64 * h, 1.0),
            Direction::Reverse => (1.0 - i as f64 * h, -1.0),
        };
        let v = guided_velocity(field, &z, &vec![q; batch], c, gamma)?;
        if v.len() != z.len() {
            return Err(Error::Mismatch("velocity and state differ in size".into()));
        }
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += sign * h * vi;
        }
    }
    if z.iter().any(|v| !v.is_finite() || v.abs() > Z_CAP) {
        return Err(Error::NonFinite(format!("integrated embedding beyond {Z_CAP}")));
    }
    Ok(z)
}

/// Tokenizers of both characters and the flow between them.
#[derive(Clone, Debug)]
pub struct PairModels {
    pub source: Tokenizer,
    pub target: Tokenizer,
    pub flow: FlowModel,
}

impl PairModels {
    pub fn new(source: Tokenizer, target: Tokenizer, flow: FlowModel) -> Result<Self> {
        if flow.source != source.character || flow.target != target.character {
            return Err(Error::MissingModel(format!(
                "no flow model for pair {}->{} (have {}->{})",
                source.character, target.character, flow.source, flow.target
            )));
        }
        if source.window != target.window || source.codebook.dim != target.codebook.dim {
            return Err(Error::Mismatch("tokenizers of the pair differ in window or code size".into()));
        }
        Ok(Self { source, target, flow })
    }

    pub fn window(&self) -> usize {
        self.source.window
    }

    /// Tokenizers read from and decoded into under `direction`.
    fn ends(&self, direction: Direction) -> (&Tokenizer, &Tokenizer) {
        match direction {
            Direction::Forward => (&self.source, &self.target),
            Direction::Reverse => (&self.target, &self.source),
        }
    }

    /// Maps token sequences laid out back to back through the flow.
    pub fn transport(&self, tokens: &[usize], req: &RetargetRequest) -> Result<Vec<usize>> {
        req.validate()?;
        let (from, to) = self.ends(req.direction);
        transport_tokens(&self.flow, &from.codebook, &to.codebook, from.latent_len(), tokens, req)
    }

    /// Retargets windows of the `from` character; one token sequence per window.
    pub fn retarget_windows(&self, windows: &[MotionWindow], req: &RetargetRequest) -> Result<Vec<(MotionWindow, TokenSequence)>> {
        let (from, to) = self.ends(req.direction);
        retarget_windows_with(&self.flow, from, to, windows, req)
    }

    pub fn retarget_window(&self, window: &MotionWindow, req: &RetargetRequest) -> Result<(MotionWindow, TokenSequence)> {
        Ok(self.retarget_windows(std::slice::from_ref(window), req)?.remove(0))
    }

    /// Retargets a whole clip: overlapping windows are transported
    /// independently, on up to [`worker_count`] threads, and cross-faded.
    pub fn retarget_clip(&self, clip: &MotionClip, req: &RetargetRequest, stride: usize) -> Result<ClipResult> {
        self.retarget_clip_on(clip, req, stride, worker_count())
    }

    /// [`retarget_clip`](Self::retarget_clip) on at most `workers` threads.
    pub fn retarget_clip_on(&self, clip: &MotionClip, req: &RetargetRequest, stride: usize, workers: usize) -> Result<ClipResult> {
        req.validate()?;
        let (from, to) = self.ends(req.direction);
        if clip.skeleton != from.character {
            return Err(Error::Mismatch(format!(
                "clip of {} given to a {}->{} retargeter",
                clip.skeleton, from.character, to.character
            )));
        }
        let h = self.window();
        let starts = window_starts(clip.len(), h, stride)?;
        let windows: Vec<MotionWindow> = starts.iter().map(|&s| MotionWindow::from_clip(clip, s, h)).collect();
        let workers = workers.clamp(1, windows.len());
        let per = windows.len().div_ceil(workers);
        let results: Vec<Result<Vec<(MotionWindow, TokenSequence)>>> = thread::scope(|s| {
            let handles: Vec<_> = windows
                .chunks(per)
                .map(|chunk| s.spawn(move || self.retarget_windows(chunk, req)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Mismatch("retarget worker panicked".into()))))
                .collect()
        });
        let mut decoded = Vec::with_capacity(windows.len());
        let mut tokens = Vec::with_capacity(windows.len());
        for r in results {
            for (w, t) in r? {
                decoded.push(w);
                tokens.push(t);
            }
        }
        let joints = (to.channels - 3) / 12;
        let frames = blend_windows(&decoded, clip.len(), joints)?;
        Ok(ClipResult {
            clip: MotionClip {
                skeleton: to.character.clone(),
                fps: clip.fps,
                frames,
            },
            tokens,
        })
    }
}

/// Output of a clip-level retarget: the motion and the token sequence of
/// every window.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipResult {
    pub clip: MotionClip,
    pub tokens: Vec<TokenSequence>,
}

/// Tokenizes `windows` with `from`, transports them through `field` and
/// decodes with `to`.
pub fn retarget_windows_with(
    field: &dyn VelocityField,
    from: &Tokenizer,
    to: &Tokenizer,
    windows: &[MotionWindow],
    req: &RetargetRequest,
) -> Result<Vec<(MotionWindow, TokenSequence)>> {
    req.validate()?;
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let tokens = from.tokenize_batch(windows)?.concat();
    let out = transport_tokens(field, &from.codebook, &to.codebook, from.latent_len(), &tokens, req)?;
    windows
        .iter()
        .zip(out.chunks(to.latent_len()))
        .map(|(w, t)| {
            let decoded = to.decode(t, w.start, w.origin)?;
            let seq = TokenSequence {
                character: to.character.clone(),
                tokens: t.to_vec(),
                start: w.start,
            };
            Ok((decoded, seq))
        })
        .collect()
}

/// Embeds `tokens` with `from`, integrates, and snaps to `to`.
pub fn transport_tokens(
    field: &dyn VelocityField,
    from: &Codebook,
    to: &Codebook,
    seq_len: usize,
    tokens: &[usize],
    req: &RetargetRequest,
) -> Result<Vec<usize>> {
    if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
        return Err(Error::Mismatch(format!("{} tokens in sequences of {seq_len}", tokens.len())));
    }
    let z0 = from.lookup(tokens)?;
    let z = integrate(field, &z0, tokens.len() / seq_len, &req.condition, req.gamma, req.steps, req.direction)?;
    to.assign(&z)
}

/// Window starts at multiples of `stride`, plus one flush with the clip end
/// when the last stride does not reach it.
pub fn window_starts(frames: usize, h: usize, stride: usize) -> Result<Vec<usize>> {
    if h == 0 || stride == 0 {
        return Err(Error::Range {
            name: "stride",
            value: stride as f64,
            range: "[1, inf)",
        });
    }
    if frames < h {
        return Err(Error::Mismatch(format!("clip of {frames} frames is shorter than the {h}-frame window")));
    }
    let mut starts: Vec<usize> = (0..=frames - h).step_by(stride).collect();
    if *starts.last().unwrap_or(&0) != frames - h {
        starts.push(frames - h);
    }
    Ok(starts)
}

/// Worker threads for clip retargeting: `MRF_THREADS` if set, otherwise the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("MRF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Stitches windows (in start order) into `frames` frames. Over each overlap
/// the running output fades linearly into the newer window; rotations are
/// projected back onto SO(3) afterwards.
pub fn blend_windows(windows: &[MotionWindow], frames: usize, joints: usize) -> Result<Vec<Frame>> {
    let c = joints * 12 + 3;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(frames);
    for w in windows {
        if w.start > out.len() {
            return Err(Error::Mismatch(format!("gap before the window at frame {}", w.start)));
        }
        let overlap = out.len() - w.start;
        for (i, f) in w.world_frames().iter().enumerate() {
            let mut ch = Vec::with_capacity(c);
            f.write_channels(&mut ch);
            let t = w.start + i;
            if i < overlap {
                let a = (i + 1) as f64 / (overlap + 1) as f64;
                for (o, n) in out[t].iter_mut().zip(&ch) {
                    *o = (1.0 - a) * *o + a * n;
                }
            } else {
                out.push(ch);
            }
        }
    }
    if out.len() != frames {
        return Err(Error::Mismatch(format!("windows cover {} of {frames} frames", out.len())));
    }
    out.iter().map(|ch| Frame::from_channels(ch, joints, true)).collect()
}

/// Applies the pairs in order, decoding and re-encoding at each hop.
pub fn chain_retarget(
    chain: &[PairModels],
    clip: &MotionClip,
    conditions: &[RetargetRequest],
    stride: usize,
) -> Result<ClipResult> {
    if chain.is_empty() || conditions.len() != chain.len() {
        return Err(Error::Mismatch(format!(
            "{} hops with {} requests",
            chain.len(),
            conditions.len()
        )));
    }
    for w in chain.windows(2) {
        if w[0].target.character != w[1].source.character {
            return Err(Error::MissingModel(format!(
                "chain breaks between {} and {}",
                w[0].target.character, w[1].source.character
            )));
        }
    }
    let mut result = ClipResult {
        clip: clip.clone(),
        tokens: Vec::new(),
    };
    for (pair, req) in chain.iter().zip(conditions) {
        result = pair.retarget_clip(&result.clip, req, stride)?;
    }
    Ok(result)
}

/// Fraction of source tokens recovered by a forward pass followed by a
/// reverse pass, as `(recovered, total)`.
pub fn round_trip_recovery(
    models: &PairModels,
    windows: &[MotionWindow],
    req: &RetargetRequest,
) -> Result<(usize, usize)> {
    let tokens = models.source.tokenize_batch(windows)?.concat();
    let mut fwd = req.clone();
    fwd.direction = Direction::Forward;
    let there = models.transport(&tokens, &fwd)?;
    let back = models.transport(&there, &fwd.reversed())?;
    let hits = tokens.iter().zip(&back).filter(|(a, b)| a == b).count();
    Ok((hits, tokens.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_cover_the_clip() {
        assert_eq!(window_starts(32, 32, 16).unwrap(), vec![0]);
        assert_eq!(window_starts(96, 32, 16).unwrap(), vec![0, 16, 32, 48, 64]);
        assert_eq!(window_starts(100, 32, 16).unwrap(), vec![0, 16, 32, 48, 64, 68]);
        assert!(window_starts(31, 32, 16).is_err());
        assert!(window_starts(64, 32, 0).is_err());
    }
}
