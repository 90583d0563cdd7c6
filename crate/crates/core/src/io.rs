//! Text formats for clips (`MRFCLIP 1`), normalization stats
//! (`MRFSTATS 1`) and token sequences (`MRFTOKENS 1`).
//!
//! ```text
//! MRFCLIP 1
//! biped-A 32 11 128
//! # seed 123
//! <135 channels of frame 0>
//! ...
//! ```
//!
//! Lines starting with `#` between the header and the first frame carry
//! `key value` metadata. Numbers use Rust's shortest round-trip formatting, so
//! writing a parsed file reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::is_rotation;
use crate::motion::{Frame, MotionClip, NormStats};
use crate::tokenizer::TokenSequence;

pub const CLIP_MAGIC: &str = "MRFCLIP 1";
pub const STATS_MAGIC: &str = "MRFSTATS 1";
pub const TOKENS_MAGIC: &str = "MRFTOKENS 1";
pub const CLIP_EXT: &str = "mrfclip";
pub const STATS_FILE: &str = "stats.mrfstats";

const MAX_JOINTS: usize = 256;
const ROTATION_TOL: f64 = 1e-6;

pub type Meta = Vec<(String, String)>;

fn push_numbers(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn push_meta(out: &mut String, meta: &[(String, String)]) {
    for (k, v) in meta {
        let _ = writeln!(out, "# {k} {v}");
    }
}

fn numbers(what: &'static str, line: usize, s: &str) -> Result<Vec<f64>> {
    s.split_ascii_whitespace()
        .map(|t| {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::parse(what, line, format!("`{t}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(what, line, "non-finite value"))
            }
        })
        .collect()
}

/// Splits `# key value` lines following the header; returns the metadata and
/// the index of the first remaining line.
fn read_meta<'a>(lines: &[&'a str], from: usize) -> (Meta, usize) {
    let mut meta = Vec::new();
    let mut i = from;
    while i < lines.len() {
        let Some(rest) = lines[i].strip_prefix('#') else {
            break;
        };
        let rest = rest.trim();
        let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
        meta.push((k.to_string(), v.trim().to_string()));
        i += 1;
    }
    (meta, i)
}

pub fn format_clip(clip: &MotionClip, meta: &[(String, String)]) -> String {
    let joints = clip.frames.first().map_or(0, |f| f.positions.len());
    let mut out = String::new();
    let _ = writeln!(out, "{CLIP_MAGIC}");
    let _ = writeln!(out, "{} {} {} {}", clip.skeleton, clip.fps, joints, clip.len());
    push_meta(&mut out, meta);
    let mut buf = Vec::new();
    for f in &clip.frames {
        buf.clear();
        f.write_channels(&mut buf);
        push_numbers(&mut out, &buf);
    }
    out
}

pub fn parse_clip(text: &str) -> Result<(MotionClip, Meta)> {
    const W: &str = "clip";
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim_end()) != Some(CLIP_MAGIC) {
        return Err(Error::parse(W, 1, format!("expected `{CLIP_MAGIC}`")));
    }
    let header: Vec<&str> = lines.get(1).map_or(vec![], |l| l.split_ascii_whitespace().collect());
    let [skeleton, fps, joints, frames] = header[..] else {
        return Err(Error::parse(W, 2, "expected `<skeleton> <fps> <joints> <frames>`"));
    };
    let fps: f64 = fps.parse().map_err(|_| Error::parse(W, 2, "bad fps"))?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::parse(W, 2, "fps must be positive"));
    }
    let joints: usize = joints.parse().map_err(|_| Error::parse(W, 2, "bad joint count"))?;
    if joints == 0 || joints > MAX_JOINTS {
        return Err(Error::parse(W, 2, format!("joint count must be in 1..={MAX_JOINTS}")));
    }
    let frames: usize = frames.parse().map_err(|_| Error::parse(W, 2, "bad frame count"))?;
    let (meta, body) = read_meta(&lines, 2);
    let body: Vec<(usize, &str)> = lines[body..]
        .iter()
        .enumerate()
        .map(|(i, l)| (body + i + 1, *l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if body.len() != frames {
        return Err(Error::parse(W, 2, format!("header says {frames} frames, found {}", body.len())));
    }
    let channels = joints * 12 + 3;
    let mut out = Vec::with_capacity(frames);
    for (line, l) in body {
        let v = numbers(W, line, l)?;
        if v.len() != channels {
            return Err(Error::parse(W, line, format!("{} channels, expected {channels}", v.len())));
        }
        let f = Frame::from_channels(&v, joints, false)?;
        if let Some(j) = f.rotations.iter().position(|r| !is_rotation(r, ROTATION_TOL)) {
            return Err(Error::parse(W, line, format!("rotation of joint {j} is not in SO(3)")));
        }
        out.push(f);
    }
    Ok((
        MotionClip {
            skeleton: skeleton.to_string(),
            fps,
            frames: out,
        },
        meta,
    ))
}

pub fn format_stats(stats: &NormStats, meta: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{STATS_MAGIC}");
    push_meta(&mut out, meta);
    out.push_str("mean ");
    push_numbers(&mut out, &stats.mean);
    out.push_str("std ");
    push_numbers(&mut out, &stats.std);
    out
}

pub fn parse_stats(text: &str) -> Result<(NormStats, Meta)> {
    const W: &str = "stats";
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim_end()) != Some(STATS_MAGIC) {
        return Err(Error::parse(W, 1, format!("expected `{STATS_MAGIC}`")));
    }
    let (meta, i) = read_meta(&lines, 1);
    let row = |k: usize, key: &str| -> Result<Vec<f64>> {
        let l = lines.get(k).ok_or_else(|| Error::parse(W, k + 1, format!("missing `{key}` line")))?;
        let rest = l
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::parse(W, k + 1, format!("expected `{key}`")))?;
        numbers(W, k + 1, rest)
    };
    let mean = row(i, "mean")?;
    let std = row(i + 1, "std")?;
    if mean.is_empty() || mean.len() != std.len() {
        return Err(Error::parse(W, i + 2, "mean and std lengths differ or are empty"));
    }
    if std.iter().any(|s| *s <= 0.0) {
        return Err(Error::parse(W, i + 2, "std must be positive"));
    }
    if lines[i + 2..].iter().any(|l| !l.trim().is_empty()) {
        return Err(Error::parse(W, i + 3, "trailing content"));
    }
    Ok((NormStats { mean, std }, meta))
}

/// One line per window: its start frame followed by its tokens.
///
/// ```text
/// MRFTOKENS 1
/// biped-B 5 8
/// 0 12 3 3 40 7 7 1 0
/// ```
pub fn format_tokens(seqs: &[TokenSequence], meta: &[(String, String)]) -> Result<String> {
    let first = seqs.first().ok_or(Error::EmptyBatch)?;
    let len = first.tokens.len();
    if seqs.iter().any(|s| s.character != first.character || s.tokens.len() != len) {
        return Err(Error::Mismatch("token sequences differ in character or length".into()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{TOKENS_MAGIC}");
    let _ = writeln!(out, "{} {} {len}", first.character, seqs.len());
    push_meta(&mut out, meta);
    for s in seqs {
        let _ = write!(out, "{}", s.start);
        for t in &s.tokens {
            let _ = write!(out, " {t}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_tokens(text: &str) -> Result<(Vec<TokenSequence>, Meta)> {
    const W: &str = "tokens";
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim_end()) != Some(TOKENS_MAGIC) {
        return Err(Error::parse(W, 1, format!("expected `{TOKENS_MAGIC}`")));
    }
    let header: Vec<&str> = lines.get(1).map_or(vec![], |l| l.split_ascii_whitespace().collect());
    let [character, count, len] = header[..] else {
        return Err(Error::parse(W, 2, "expected `<character> <windows> <length>`"));
    };
    let count: usize = count.parse().map_err(|_| Error::parse(W, 2, "bad window count"))?;
    let len: usize = len.parse().map_err(|_| Error::parse(W, 2, "bad sequence length"))?;
    let (meta, body) = read_meta(&lines, 2);
    let body: Vec<(usize, &str)> = lines[body..]
        .iter()
        .enumerate()
        .map(|(i, l)| (body + i + 1, *l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if body.len() != count || count == 0 {
        return Err(Error::parse(W, 2, format!("header says {count} windows, found {}", body.len())));
    }
    let mut out = Vec::with_capacity(count);
    for (line, l) in body {
        let v = l
            .split_ascii_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::parse(W, line, format!("`{t}` is not an index"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != len + 1 {
            return Err(Error::parse(W, line, format!("{} tokens, expected {len}", v.len().saturating_sub(1))));
        }
        out.push(TokenSequence {
            character: character.to_string(),
            start: v[0],
            tokens: v[1..].to_vec(),
        });
    }
    Ok((out, meta))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<(MotionClip, Meta)> {
    parse_clip(&read_to_string(path)?)
}

pub fn write_clip(path: &Path, clip: &MotionClip, meta: &[(String, String)]) -> Result<()> {
    write_string(path, &format_clip(clip, meta))
}

pub fn read_stats(path: &Path) -> Result<(NormStats, Meta)> {
    parse_stats(&read_to_string(path)?)
}

pub fn write_stats(path: &Path, stats: &NormStats, meta: &[(String, String)]) -> Result<()> {
    write_string(path, &format_stats(stats, meta))
}

pub fn write_tokens(path: &Path, seqs: &[TokenSequence], meta: &[(String, String)]) -> Result<()> {
    write_string(path, &format_tokens(seqs, meta)?)
}

pub fn read_tokens(path: &Path) -> Result<(Vec<TokenSequence>, Meta)> {
    parse_tokens(&read_to_string(path)?)
}

/// Clip files of a directory in name order.
pub fn list_clips(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CLIP_EXT))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads every clip of a directory, in name order.
pub fn read_clip_dir(dir: &Path) -> Result<Vec<MotionClip>> {
    list_clips(dir)?
        .iter()
        .map(|p| read_clip(p).map(|(c, _)| c))
        .collect()
}

/// Value of a metadata key.
pub fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}
