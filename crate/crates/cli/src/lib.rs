//! Command implementations behind the `sfc` binary.
//!
//! Every config key is also a flag: `--optim.steps 500` or `--seed=3`.
//! Precedence is defaults, then `--config FILE`, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use sfc_core::checkpoint::Checkpoint;
use sfc_core::config::{Config, KEYS};
use sfc_core::data::{
    generate_synthetic_video, label_path, load_frames, load_keypoints, load_labels, write_video_dir,
    format_keypoints, BatchIterator, Image, Keypoint, LabelMap, KEYPOINTS_PER_SPRITE,
};
use sfc_core::encoder::{DenseFeatureMap, EncoderPair, ModelKind};
use sfc_core::evaluate::{encode_frames, fuse_frames, score_segmentation};
use sfc_core::propagation::{
    boundary_tolerance, dump_affinity_heatmap, metric_f, metric_j, metric_pck, propagate_keypoints, propagate_video,
    reference_size, LabelGrid, PropagationConfig,
};
use sfc_core::train::{gradcheck_step, train, training_frames, write_log_csv, Trainer};
use sfc_core::{ErrorKind, Result, SfcError};

pub const CHECKPOINT_FILE: &str = "checkpoint.sfck";
pub const LOG_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Elements probed by the pre-training gradient check.
pub const GRADCHECK_PROBES: usize = 64;

#[derive(Parser, Debug)]
#[command(name = "sfc", version, about = "Fine-grained and semantic correspondence for video label propagation")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run a 64-bit finite-difference check of one step before training.
    #[arg(long, global = true)]
    pub grad_check: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the fine-grained dense branch.
    TrainFc(TrainArgs),
    /// Train the image-level semantic branch.
    TrainSemantic(TrainArgs),
    /// Train dense and image-level heads on a shared backbone.
    TrainJoint(TrainArgs),
    /// Propagate first-frame labels through a video.
    Propagate(PropagateArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Write synthetic videos in the dataset layout.
    Synth(SynthArgs),
    /// Finite-difference check of one training step.
    Gradcheck(GradcheckArgs),
    /// Write the affinity of one source cell to every target cell.
    DumpHeatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root of `videoNNNNN/frameNNNNN.ppm`; synthetic scenes if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PropagateArgs {
    /// Fine-grained checkpoint.
    #[arg(long)]
    pub fine: PathBuf,
    /// Semantic checkpoint; switches to fused features.
    #[arg(long)]
    pub semantic: Option<PathBuf>,
    /// Video directory of `frameNNNNN.ppm`.
    #[arg(long)]
    pub video: PathBuf,
    /// First-frame label map; defaults to `<video>/labels/frame00000.pgm`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Propagate keypoints from this file instead of a label map.
    #[arg(long, conflicts_with = "labels")]
    pub keypoints: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write affinity heatmaps of this first-frame cell, as `row,col`.
    #[arg(long, value_parser = parse_cell)]
    pub heatmap_cell: Option<(usize, usize)>,
    /// Accept checkpoints whose architecture hashes differ.
    #[arg(long)]
    pub allow_mismatch: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Jf,
    Pck,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted label directory, or keypoint file for `pck`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label directory, or keypoint file for `pck`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "jf")]
    pub metric: Metric,
    /// CSV report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Keypoints per instance, for the PCK reference size.
    #[arg(long, default_value_t = KEYPOINTS_PER_SPRITE)]
    pub group: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "fine", value_parser = parse_kind)]
    pub kind: ModelKind,
    /// Elements to check; 0 checks every weight.
    #[arg(long, default_value_t = GRADCHECK_PROBES)]
    pub probes: usize,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Defaults to the source frame.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, value_parser = parse_cell)]
    pub cell: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_cell(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected `row,col`")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad cell index `{v}`"));
    Ok((p(r)?, p(c)?))
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model kind `{s}` (fine, semantic, joint)"))
}

/// Process exit code for an error.
pub fn exit_code(e: &SfcError) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

/// Split `--<config key> value` pairs out of `args`. Dotted flags that are
/// not config keys are rejected.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if KEYS.contains(&name) {
            let value = match inline {
                Some(v) => v,
                None => it
                    .next()
                    .cloned()
                    .ok_or_else(|| SfcError::Config(format!("flag --{name} needs a value")))?,
            };
            overrides.push((name.to_string(), value));
        } else if name.contains('.') {
            return Err(SfcError::Config(format!("unknown config key `{name}`")));
        } else {
            rest.push(a.clone());
        }
    }
    Ok((rest, overrides))
}

/// Defaults, then the config file, then flag overrides.
pub fn resolve_config(base: Config, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut c = base;
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| SfcError::io(p, e))?;
        c.merge_text(&text, &p.display().to_string())?;
    }
    for (k, v) in overrides {
        c.set(k, v)?;
    }
    Ok(c)
}

/// Parse and run one command line (without the program name).
pub fn run(args: &[String]) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(std::iter::once("sfc".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(SfcError::Config(e.to_string().trim_end().to_string())),
    };
    let resolve = |base: Config| {
        let c = resolve_config(base, cli.config.as_deref(), &overrides)?;
        c.validate()?;
        Ok::<_, SfcError>(c)
    };
    match &cli.command {
        Command::TrainFc(a) => cmd_train(resolve(Config::for_kind(ModelKind::Fine))?, ModelKind::Fine, a, cli.grad_check),
        Command::TrainSemantic(a) => cmd_train(
            resolve(Config::for_kind(ModelKind::Semantic))?,
            ModelKind::Semantic,
            a,
            cli.grad_check,
        ),
        Command::TrainJoint(a) => cmd_train(resolve(Config::for_kind(ModelKind::Joint))?, ModelKind::Joint, a, cli.grad_check),
        Command::Propagate(a) => cmd_propagate(resolve(Config::default())?, a),
        Command::Eval(a) => cmd_eval(resolve(Config::default())?, a),
        Command::Synth(a) => cmd_synth(resolve(Config::default())?, a),
        Command::Gradcheck(a) => {
            let c = resolve(Config::for_kind(a.kind))?;
            run_gradcheck(&c, a.kind, (a.probes > 0).then_some(a.probes))
        }
        Command::DumpHeatmap(a) => cmd_dump_heatmap(resolve(Config::default())?, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SfcError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SfcError::io(path, e))
}

/// Resolved config beside a single-file output: `<file>.config.txt`.
fn config_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".config.txt");
    file.with_file_name(name)
}

/// Check one full training step at 64-bit against finite differences.
pub fn run_gradcheck(config: &Config, kind: ModelKind, probes: Option<usize>) -> Result<()> {
    let trainer = Trainer::<f64>::new(config, kind)?;
    let mut batches = BatchIterator::new(
        training_frames(config)?,
        config.optim.batch,
        config.sampler()?,
        config.loss.radius,
        config.augmentation(),
        config.seed,
    )?;
    let batch = batches.next_batch()?;
    let report = gradcheck_step(config, &trainer.pair, trainer.queue.as_ref(), &batch, probes)?;
    println!(
        "gradcheck {}: {} elements, max rel err {:.3e}",
        report.op, report.elements, report.max_rel_err
    );
    Ok(())
}

fn cmd_train(mut config: Config, kind: ModelKind, args: &TrainArgs, grad_check: bool) -> Result<()> {
    if let Some(d) = &args.data {
        config.data.dir = d.display().to_string();
    }
    if grad_check {
        run_gradcheck(&config, kind, Some(GRADCHECK_PROBES))?;
    }
    let frames = training_frames(&config)?;
    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG_FILE), &config.serialize())?;
    let out = train(&config, kind, frames, |row| {
        info!("step {} loss {:.5} momentum {:.5}", row.step, row.loss.total, row.momentum)
    })?;
    write_log_csv(&args.out.join(LOG_FILE), &out.log)?;
    Checkpoint::from_pair(&out.trainer.pair, &config).save(args.out.join(CHECKPOINT_FILE))?;
    println!(
        "{} steps ({} skipped) -> {}",
        config.optim.steps,
        out.trainer.skipped,
        args.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_pair(path: &Path) -> Result<(Checkpoint, EncoderPair<f32>)> {
    let ck = Checkpoint::load(path)?;
    let (_, pair) = ck.to_pair::<f32>()?;
    Ok((ck, pair))
}

/// Propagation settings for the chosen path. The radius is given on a
/// 36-cell reference grid and scaled to the feature grid. The fused path
/// swaps in its own top-k and radius unless those keys were changed.
pub fn propagation_for(config: &Config, fused: bool, grid: usize) -> PropagationConfig {
    let mut p = config.propagation();
    let single = PropagationConfig::single();
    if fused && p.top_k == single.top_k && p.radius == single.radius {
        let f = PropagationConfig::fused();
        p.top_k = f.top_k;
        p.radius = f.radius;
    }
    p.rescaled(grid)
}

fn cmd_propagate(config: Config, args: &PropagateArgs) -> Result<()> {
    let (fine_ck, fine) = load_pair(&args.fine)?;
    let semantic = args.semantic.as_deref().map(load_pair).transpose()?;
    if let Some((sem_ck, _)) = &semantic {
        if sem_ck.config_hash != fine_ck.config_hash && !args.allow_mismatch {
            return Err(SfcError::Config(format!(
                "checkpoints have different architectures ({:016x} vs {:016x}); pass --allow-mismatch to fuse anyway",
                fine_ck.config_hash, sem_ck.config_hash
            )));
        }
    }
    let frames = load_frames(&args.video)?;
    let first = frames
        .first()
        .ok_or_else(|| SfcError::Data(format!("{}: no frames", args.video.display())))?;
    let (h, w) = (first.height, first.width);
    if let Some(f) = frames.iter().find(|f| (f.height, f.width) != (h, w)) {
        return Err(SfcError::Data(format!("frame size {}x{} differs from {w}x{h}", f.width, f.height)));
    }

    let fine_feats = encode_frames(&fine.online, &fine.config.backbone, &frames)?;
    let features: Vec<DenseFeatureMap> = match &semantic {
        Some((_, sem)) => {
            let s = encode_frames(&sem.online, &sem.config.backbone, &frames)?;
            fuse_frames(&s, &fine_feats, config.propagate.lambda)?
        }
        None => fine_feats,
    };
    let (rows, cols) = (features[0].rows, features[0].cols);
    let prop = propagation_for(&config, semantic.is_some(), rows.max(cols));
    prop.validate()?;
    if let Some((r, c)) = args.heatmap_cell.filter(|&(r, c)| r >= rows || c >= cols) {
        return Err(SfcError::Config(format!("heatmap cell ({r},{c}) outside the {rows}x{cols} grid")));
    }

    if let Some(kp_path) = &args.keypoints {
        let kps = load_keypoints(kp_path)?;
        let first_kps = kps.first().filter(|k| !k.is_empty()).ok_or_else(|| {
            SfcError::Data(format!("{}: no keypoints on frame 0", kp_path.display()))
        })?;
        let grid = LabelGrid::from_keypoints(first_kps, h, w, rows, cols)?;
        let out = propagate_keypoints(&features, &grid, &prop)?;
        let mut pred = vec![first_kps.clone()];
        for g in &out[1..] {
            let pts = g.decode_keypoints(h, w);
            pred.push(
                first_kps
                    .iter()
                    .zip(pts)
                    .map(|(k, (x, y))| Keypoint { index: k.index, x, y })
                    .collect(),
            );
        }
        create_dir(&args.out)?;
        write_text(&args.out.join("keypoints.txt"), &format_keypoints(&pred))?;
    } else {
        let label_file = args.labels.clone().unwrap_or_else(|| label_path(&args.video.join("labels"), 0));
        let labels = LabelMap::load(&label_file)?;
        if (labels.height, labels.width) != (h, w) {
            return Err(SfcError::Data(format!(
                "first-frame labels are {}x{} but frames are {w}x{h}",
                labels.width, labels.height
            )));
        }
        let grid = LabelGrid::from_label_map(&labels, rows, cols, labels.max_label() as usize + 1)?;
        let out = propagate_video(&features, &grid, &prop)?;
        let decoded = out[1..].iter().map(|g| g.decode(h, w)).collect::<Result<Vec<_>>>()?;
        create_dir(&args.out)?;
        labels.save(label_path(&args.out, 0))?;
        for (t, l) in decoded.iter().enumerate() {
            l.save(label_path(&args.out, t + 1))?;
        }
    }
    if let Some(cell) = args.heatmap_cell {
        let dir = args.out.join("heatmaps");
        create_dir(&dir)?;
        for (t, f) in features.iter().enumerate() {
            dump_affinity_heatmap(&features[0], cell, f, label_path(&dir, t))?;
        }
    }
    let mut resolved = config.clone();
    resolved.propagate.top_k = prop.top_k;
    resolved.propagate.radius = prop.radius;
    write_text(
        &args.out.join(CONFIG_FILE),
        &format!(
            "# propagate.radius below is in feature-grid cells ({rows}x{cols})\n{}",
            resolved.serialize()
        ),
    )?;
    println!("{} frames -> {}", frames.len(), args.out.display());
    Ok(())
}

/// Per-frame rows of an evaluation report plus the summary values.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub header: Vec<&'static str>,
    pub rows: Vec<(usize, Vec<f64>)>,
    pub summary: Vec<f64>,
}

impl Report {
    pub fn csv(&self) -> String {
        let mut s = format!("frame,{}\n", self.header.join(","));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        for (t, v) in &self.rows {
            s.push_str(&format!("{t},{}\n", fmt(v)));
        }
        s.push_str(&format!("mean,{}\n", fmt(&self.summary)));
        s
    }
}

fn missing_error(what: &str, missing: &[usize]) -> SfcError {
    let list: Vec<String> = missing.iter().map(|t| format!("{t:05}")).collect();
    SfcError::Data(format!("{what} missing for frames {}", list.join(", ")))
}

/// J, F and J&F per frame `1..` and as object means.
pub fn evaluate_jf(pred_dir: &Path, gt_dir: &Path) -> Result<Report> {
    let gt = load_labels(gt_dir)?;
    let mut pred: std::collections::BTreeMap<usize, LabelMap> = load_labels(pred_dir)?.into_iter().collect();
    if gt.is_empty() {
        return Err(SfcError::Data(format!("{}: no ground-truth labels", gt_dir.display())));
    }
    let missing: Vec<usize> = gt.iter().map(|(t, _)| *t).filter(|t| !pred.contains_key(t)).collect();
    if !missing.is_empty() {
        return Err(missing_error("predictions", &missing));
    }
    let classes = gt[0].1.max_label() as usize + 1;
    let (mut p, mut g) = (Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for (i, (t, gm)) in gt.into_iter().enumerate() {
        let pm = pred.remove(&t).expect("checked above");
        if (pm.height, pm.width) != (gm.height, gm.width) {
            return Err(SfcError::Data(format!("frame {t:05}: prediction and ground truth sizes differ")));
        }
        if i > 0 && classes > 1 {
            let tol = boundary_tolerance(gm.height, gm.width);
            let (mut j, mut f) = (0.0, 0.0);
            for k in 1..classes as u8 {
                let (a, b) = (pm.binary(k), gm.binary(k));
                j += metric_j(&a, &b)?;
                f += metric_f(&a, &b, gm.height, gm.width, tol)?;
            }
            let n = (classes - 1) as f64;
            rows.push((t, vec![j / n, f / n, (j + f) / (2.0 * n)]));
        }
        p.push(pm);
        g.push(gm);
    }
    let s = score_segmentation(&p, &g, classes)?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (jm, fm) = (mean(&s.j), mean(&s.f));
    Ok(Report {
        header: vec!["j", "f", "jf"],
        rows,
        summary: vec![jm, fm, (jm + fm) / 2.0],
    })
}

/// PCK@0.1 and PCK@0.2 per frame `1..`. Each instance of `group`
/// consecutive keypoint indices uses its own ground-truth bounding box.
pub fn evaluate_pck(pred: &[Vec<Keypoint>], gt: &[Vec<Keypoint>], group: usize) -> Result<Report> {
    if group == 0 {
        return Err(SfcError::Config("--group must be >= 1".into()));
    }
    let missing: Vec<usize> = (0..gt.len())
        .filter(|&t| !gt[t].is_empty() && pred.get(t).is_none_or(|p| p.is_empty()))
        .collect();
    if !missing.is_empty() {
        return Err(missing_error("predicted keypoints", &missing));
    }
    let mut rows = Vec::new();
    let (mut hits, mut total) = ([0.0; 2], 0usize);
    for t in 1..gt.len() {
        let (mut frame_hits, mut n) = ([0.0; 2], 0usize);
        let mut instances: std::collections::BTreeMap<usize, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = Default::default();
        for g in &gt[t] {
            let p = pred[t]
                .iter()
                .find(|p| p.index == g.index)
                .ok_or_else(|| SfcError::Data(format!("frame {t:05}: predicted keypoint {} missing", g.index)))?;
            let e = instances.entry(g.index / group).or_default();
            e.0.push((p.x, p.y));
            e.1.push((g.x, g.y));
        }
        for (pp, gg) in instances.values() {
            let r = reference_size(gg);
            for (slot, alpha) in [0.1, 0.2].into_iter().enumerate() {
                frame_hits[slot] += metric_pck(pp, gg, alpha, r)? * gg.len() as f64;
            }
            n += gg.len();
        }
        if n > 0 {
            rows.push((t, frame_hits.iter().map(|h| h / n as f64).collect()));
            hits[0] += frame_hits[0];
            hits[1] += frame_hits[1];
            total += n;
        }
    }
    let summary = hits.iter().map(|h| if total == 0 { 0.0 } else { h / total as f64 }).collect();
    Ok(Report {
        header: vec!["pck@0.1", "pck@0.2"],
        rows,
        summary,
    })
}

fn keypoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("keypoints.txt")
    } else {
        p.to_path_buf()
    }
}

fn cmd_eval(config: Config, args: &EvalArgs) -> Result<()> {
    let report = match args.metric {
        Metric::Jf => evaluate_jf(&args.pred, &args.gt)?,
        Metric::Pck => evaluate_pck(
            &load_keypoints(&keypoint_file(&args.pred))?,
            &load_keypoints(&keypoint_file(&args.gt))?,
            args.group,
        )?,
    };
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(&args.report, &report.csv())?;
    write_text(&config_beside(&args.report), &config.serialize())?;
    let summary: Vec<String> = report
        .header
        .iter()
        .zip(&report.summary)
        .map(|(h, v)| format!("{h}={v:.4}"))
        .collect();
    println!("{}", summary.join(" "));
    Ok(())
}

fn cmd_synth(config: Config, args: &SynthArgs) -> Result<()> {
    let spec = config.scene_spec();
    spec.validate()?;
    create_dir(&args.out)?;
    for i in 0..config.data.videos {
        let v = generate_synthetic_video(&spec, config.data.seed.wrapping_add(i as u64))?;
        write_video_dir(&args.out.join(format!("video{i:05}")), &v)?;
    }
    write_text(&args.out.join(CONFIG_FILE), &config.serialize())?;
    println!("{} videos -> {}", config.data.videos, args.out.display());
    Ok(())
}

fn cmd_dump_heatmap(config: Config, args: &HeatmapArgs) -> Result<()> {
    let (_, pair) = load_pair(&args.ckpt)?;
    let source = Image::load(&args.source)?;
    let target = match &args.target {
        Some(p) => Image::load(p)?,
        None => source.clone(),
    };
    let f = encode_frames(&pair.online, &pair.config.backbone, &[source, target])?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dump_affinity_heatmap(&f[0], args.cell, &f[1], &args.out)?;
    write_text(&config_beside(&args.out), &config.serialize())?;
    println!("{}x{} heatmap -> {}", f[1].rows, f[1].cols, args.out.display());
    Ok(())
}
