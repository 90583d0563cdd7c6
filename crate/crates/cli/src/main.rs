//! `moreflow`: generate synthetic data, train tokenizers and flow
//! retargeters, retarget clips and score the results.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moreflow_core::config::RunConfig;
use moreflow_core::features::{metric_features, Condition};
use moreflow_core::flow::{FlowModel, FlowTrainer, PairData};
use moreflow_core::io::{self, meta_get, Meta};
use moreflow_core::metrics::{alignment, diversity, fid, naturalness, FeatureSet, Report};
use moreflow_core::motion::{extract_windows, Dataset, Frame, MotionClip};
use moreflow_core::sampler::{chain_retarget, PairModels, RetargetRequest, DEFAULT_STEPS};
use moreflow_core::skeleton::Skeleton;
use moreflow_core::synth::corpus;
use moreflow_core::tokenizer::{perplexity, Tokenizer, TokenizerTrainer};
use moreflow_core::{Error, Result};

#[derive(Parser)]
#[command(name = "moreflow", version, about = "Condition-guided motion retargeting with discrete flows")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic clips and normalization stats per character.
    GenData(GenData),
    /// Train the tokenizer of one character.
    TrainTokenizer(TrainTokenizer),
    /// Train the flow between two characters with trained tokenizers.
    TrainFlow(TrainFlow),
    /// Retarget a clip through one pair or a chain of pairs.
    Retarget(Retarget),
    /// Score retargeted clips against their sources.
    Eval(Eval),
    /// Print codebook usage of a tokenizer checkpoint.
    CodebookStats(CodebookStats),
}

#[derive(Args)]
struct GenData {
    /// Comma-separated character ids.
    #[arg(long, value_delimiter = ',', required = true)]
    characters: Vec<String>,
    #[arg(long, default_value_t = 200)]
    clips: usize,
    #[arg(long, default_value_t = 128)]
    frames: usize,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; one subdirectory per character.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTokenizer {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clip directory of the character.
    #[arg(long)]
    character: PathBuf,
    /// Model directory; receives `tokenizer-<id>.mrf` and its CSV log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFlow {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clip directory of the source character.
    #[arg(long)]
    src: PathBuf,
    /// Clip directory of the target character.
    #[arg(long)]
    tgt: PathBuf,
    /// Model directory holding both tokenizers; receives
    /// `flow-<src>-<tgt>.mrf` and its CSV log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Retarget {
    #[arg(long)]
    clip: PathBuf,
    /// Model directory.
    #[arg(long)]
    models: PathBuf,
    /// Characters to pass through, `src:tgt` or `a:b:c` for a chain.
    #[arg(long)]
    pair: String,
    #[arg(long, default_value = "null")]
    condition: Condition,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    /// Run the `src:tgt` flow backwards on a target-character clip.
    #[arg(long)]
    reverse: bool,
    /// Window stride; defaults to half a window.
    #[arg(long)]
    stride: Option<usize>,
    /// Output clip; tokens go to the same path with a `.tokens` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source clip or directory of clips.
    #[arg(long)]
    src: PathBuf,
    /// Retargeted clip or directory, paired with `--src` in name order.
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    condition: Condition,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CodebookStats {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn tokenizer_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("tokenizer-{id}.mrf"))
}

fn flow_path(dir: &Path, src: &str, tgt: &str) -> PathBuf {
    dir.join(format!("flow-{src}-{tgt}.mrf"))
}

fn require_file(path: &Path, src: &str, tgt: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingModel(format!("{src}->{tgt} ({} is missing)", path.display())))
    }
}

/// Clips of a directory, or the single clip at `path`.
fn read_clips(path: &Path) -> Result<Vec<MotionClip>> {
    if path.is_dir() {
        let clips = io::read_clip_dir(path)?;
        if clips.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(clips)
    } else {
        Ok(vec![io::read_clip(path)?.0])
    }
}

fn character_dataset(dir: &Path, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let clips = read_clips(dir)?;
    let id = clips[0].skeleton.clone();
    if let Some(c) = clips.iter().find(|c| c.skeleton != id) {
        return Err(Error::Mismatch(format!("{} mixes {id} and {} clips", dir.display(), c.skeleton)));
    }
    Dataset::new(Skeleton::builtin(&id)?, clips, cfg.data.window, cfg.data.stride)?.split(cfg.data.val_fraction)
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    for id in &a.characters {
        let skel = Skeleton::builtin(id)?;
        let clips = corpus(&skel, a.clips, a.frames, cfg.run.seed)?;
        let dir = a.out.join(id);
        let mut stamp = cfg.stamp();
        stamp.push(("character".into(), id.clone()));
        for (i, c) in clips.iter().enumerate() {
            io::write_clip(&dir.join(format!("clip-{i:04}.{}", io::CLIP_EXT)), c, &stamp)?;
        }
        let ds = Dataset::new(skel, clips, cfg.data.window, cfg.data.stride)?;
        io::write_stats(&dir.join(io::STATS_FILE), &ds.stats()?, &stamp)?;
        println!("{id}: {} clips, {} windows -> {}", a.clips, ds.len(), dir.display());
    }
    Ok(())
}

fn train_tokenizer(a: TrainTokenizer) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (train, val) = character_dataset(&a.character, &cfg)?;
    let id = train.skeleton.id.clone();
    let out = tokenizer_path(&a.out, &id);
    let stamp = cfg.stamp();
    let mut trainer = TokenizerTrainer::new(&train, &val, cfg.tokenizer.clone(), cfg.run.seed)?;
    let rescue = out.with_extension("rescue.mrf");
    trainer.run(Some((&rescue, &stamp)))?;
    let perp = trainer.validation_perplexity()?;
    let (model, log) = trainer.finish();
    model.save(&out, &stamp)?;
    io::write_string(&out.with_extension("csv"), &with_header(&stamp, &log.to_csv()))?;
    println!("{id}: {} iterations, validation perplexity {perp:.2} -> {}", cfg.tokenizer.iters, out.display());
    Ok(())
}

fn train_flow(a: TrainFlow) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (src_train, _) = character_dataset(&a.src, &cfg)?;
    let (tgt_train, _) = character_dataset(&a.tgt, &cfg)?;
    let (s, t) = (src_train.skeleton.id.clone(), tgt_train.skeleton.id.clone());
    let (sp, tp) = (tokenizer_path(&a.out, &s), tokenizer_path(&a.out, &t));
    require_file(&sp, &s, &t)?;
    require_file(&tp, &s, &t)?;
    let (src_tok, _) = Tokenizer::load(&sp)?;
    let (tgt_tok, _) = Tokenizer::load(&tp)?;
    let data = PairData::new(src_train, tgt_train, &src_tok, &tgt_tok, cfg.conditions.set.clone())?;
    let stamp = cfg.stamp();
    let out = flow_path(&a.out, &s, &t);
    let mut trainer = FlowTrainer::new(data, &src_tok, &tgt_tok, cfg.flow.clone(), cfg.run.seed)?;
    trainer.run(Some((&out.with_extension("rescue.mrf"), &stamp)))?;
    let csv = trainer.log_csv();
    let val = trainer.validation_fm()?;
    trainer.finish().save(&out, &stamp)?;
    io::write_string(&out.with_extension("csv"), &with_header(&stamp, &csv))?;
    println!("{s} -> {t}: {} iterations, validation L_FM {val:.4} -> {}", cfg.flow.iters, out.display());
    Ok(())
}

fn with_header(meta: &[(String, String)], csv: &str) -> String {
    let mut out: String = meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
    out.push_str(csv);
    out
}

fn load_pair(dir: &Path, src: &str, tgt: &str) -> Result<(PairModels, Meta)> {
    let fp = flow_path(dir, src, tgt);
    let sp = tokenizer_path(dir, src);
    let tp = tokenizer_path(dir, tgt);
    for p in [&fp, &sp, &tp] {
        require_file(p, src, tgt)?;
    }
    let (flow, meta) = FlowModel::load(&fp)?;
    let models = PairModels::new(Tokenizer::load(&sp)?.0, Tokenizer::load(&tp)?.0, flow)?;
    Ok((models, meta))
}

fn retarget(a: Retarget) -> Result<()> {
    let (clip, _) = io::read_clip(&a.clip)?;
    let hops: Vec<&str> = a.pair.split(':').collect();
    if hops.len() < 2 || hops.iter().any(|h| h.is_empty()) {
        return Err(Error::Config(format!("--pair `{}` must name at least two characters", a.pair)));
    }
    if a.reverse && hops.len() != 2 {
        return Err(Error::Config("--reverse takes a single pair".into()));
    }
    let expect = if a.reverse { hops[1] } else { hops[0] };
    if clip.skeleton != expect {
        return Err(Error::Mismatch(format!("clip is {}, --pair starts at {expect}", clip.skeleton)));
    }
    let mut req = RetargetRequest::new(a.condition.clone(), a.gamma, a.steps);
    if a.reverse {
        req = req.reversed();
    }
    req.validate()?;

    let mut chain = Vec::new();
    let mut meta = Vec::new();
    for w in hops.windows(2) {
        let (m, fm) = load_pair(&a.models, w[0], w[1])?;
        if meta.is_empty() {
            meta = fm;
        }
        chain.push(m);
    }
    let stride = a.stride.unwrap_or(chain[0].window() / 2);
    let result = chain_retarget(&chain, &clip, &vec![req; chain.len()], stride)?;

    let mut stamp: Meta = ["fingerprint", "seed"]
        .iter()
        .map(|k| (k.to_string(), meta_get(&meta, k).unwrap_or("none").to_string()))
        .collect();
    stamp.push(("pair".into(), a.pair.clone()));
    stamp.push(("condition".into(), a.condition.to_string()));
    stamp.push(("gamma".into(), a.gamma.to_string()));
    stamp.push(("steps".into(), a.steps.to_string()));
    stamp.push(("direction".into(), if a.reverse { "reverse" } else { "forward" }.into()));
    io::write_clip(&a.out, &result.clip, &stamp)?;
    io::write_tokens(&a.out.with_extension("tokens"), &result.tokens, &stamp)?;
    println!(
        "{} frames {} -> {}, {} windows -> {}",
        result.clip.len(),
        clip.skeleton,
        result.clip.skeleton,
        result.tokens.len(),
        a.out.display()
    );
    Ok(())
}

fn windows_of(clips: &[MotionClip], cfg: &RunConfig) -> Vec<Vec<Frame>> {
    clips
        .iter()
        .flat_map(|c| extract_windows(c, cfg.data.window, cfg.data.stride))
        .map(|w| w.frames)
        .collect()
}

fn features(windows: &[Vec<Frame>], skel: &Skeleton) -> Result<FeatureSet> {
    let rows = windows.iter().map(|w| metric_features(w, skel)).collect::<Result<Vec<_>>>()?;
    FeatureSet::from_rows(&rows)
}

fn eval(a: Eval) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let src = read_clips(&a.src)?;
    let tgt = read_clips(&a.tgt)?;
    if src.len() != tgt.len() {
        return Err(Error::Mismatch(format!("{} source clips, {} retargeted", src.len(), tgt.len())));
    }
    if let Some((s, t)) = src.iter().zip(&tgt).find(|(s, t)| s.len() != t.len()) {
        return Err(Error::Mismatch(format!("paired clips of {} and {} frames", s.len(), t.len())));
    }
    let src_skel = Skeleton::builtin(&src[0].skeleton)?;
    let tgt_skel = Skeleton::builtin(&tgt[0].skeleton)?;
    let (sw, tw) = (windows_of(&src, &cfg), windows_of(&tgt, &cfg));
    if sw.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tf = features(&tw, &tgt_skel)?;
    let nat_frames: f64 = tgt
        .iter()
        .map(|c| naturalness(c, &tgt_skel, &cfg.metrics).map(|n| n * c.len() as f64))
        .sum::<Result<f64>>()?;
    let total: usize = tgt.iter().map(MotionClip::len).sum();

    let mut report = Report::new(&cfg.fingerprint(), cfg.run.seed, &cfg.metrics);
    report.push("FID", fid(&features(&sw, &src_skel)?, &tf)?);
    report.push("DIV", diversity(&tf)?);
    if !a.condition.is_null() {
        report.push("ALI", alignment(&sw, &src_skel, &tw, &tgt_skel, &a.condition)?);
    }
    report.push("NAT", nat_frames / total as f64);
    io::write_string(&a.out, &report.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn codebook_stats(a: CodebookStats) -> Result<()> {
    let (tok, meta) = Tokenizer::load(&a.checkpoint)?;
    let cb = &tok.codebook;
    let live = cb.ema_size.iter().filter(|s| **s >= 1.0).count();
    let resets: u32 = cb.resets.iter().sum();
    let mut out = with_header(&meta, "");
    let _ = writeln!(out, "character,{}", tok.character);
    let _ = writeln!(out, "codes,{}", cb.size);
    let _ = writeln!(out, "live,{live}");
    let _ = writeln!(out, "usage,{}", live as f64 / cb.size as f64);
    let _ = writeln!(out, "perplexity,{}", perplexity(&cb.ema_size));
    let _ = writeln!(out, "resets,{resets}");
    out.push_str("code,ema_size,usage,resets,dead_steps\n");
    for k in 0..cb.size {
        let _ = writeln!(out, "{k},{},{},{},{}", cb.ema_size[k], cb.usage[k], cb.resets[k], cb.dead_steps[k]);
    }
    // a closed pipe (`| head`) is not an error
    let _ = std::io::stdout().write_all(out.as_bytes());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::TrainFlow(a) => train_flow(a),
        Command::Retarget(a) => retarget(a),
        Command::Eval(a) => eval(a),
        Command::CodebookStats(a) => codebook_stats(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
