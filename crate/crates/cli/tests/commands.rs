use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sfc_cli::{run, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE};
use sfc_core::checkpoint::Checkpoint;
use sfc_core::config::Config;
use sfc_core::data::{label_path, load_labels, Image, LabelMap};
use sfc_core::encoder::{EncoderPair, ModelKind};
use sfc_core::ErrorKind;
use tempfile::TempDir;

const TINY: &str = "
seed = 5
[backbone]
widths = 4,6
strides = 2,2
kernels = 3,3
input_size = 16
[heads]
hidden = 8
out = 4
[loss]
queue = 8
[optim]
batch = 2
steps = 3
log_every = 1
[data]
frame_size = 32
frames = 4
videos = 2
";

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sfc(cfg: &Path, parts: &[&str]) -> sfc_core::Result<()> {
    let mut a = args(&["--config", path(cfg)]);
    a.extend(args(parts));
    run(&a)
}

fn train(cfg: &Path, cmd: &str, out: &Path, extra: &[&str]) {
    let mut parts = vec![cmd, "--out", path(out)];
    parts.extend_from_slice(extra);
    sfc(cfg, &parts).unwrap();
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    train(&cfg, "train-fc", &out, &["--optim.steps", "0"]);
    let (config, pair) = Checkpoint::load(out.join(CHECKPOINT_FILE)).unwrap().to_pair::<f32>().unwrap();
    let init = EncoderPair::<f32>::init(&config.encoder(ModelKind::Fine), config.seed).unwrap();
    assert_eq!(pair.online.weights.tensors(), init.online.weights.tensors());
    assert_eq!(pair.target.buffers.tensors(), init.target.buffers.tensors());
}

#[test]
fn training_is_deterministic_and_writes_outputs() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        train(&cfg, "train-semantic", out, &[]);
    }
    let bytes = |p: &Path| fs::read(p.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(fs::read(a.join(LOG_FILE)).unwrap(), fs::read(b.join(LOG_FILE)).unwrap());
    let resolved = Config::parse(&fs::read_to_string(a.join(CONFIG_FILE)).unwrap()).unwrap();
    assert!(resolved.augment.color_jitter, "semantic branch defaults to photometric augmentation");
    assert_eq!(resolved.optim.steps, 3);
}

#[test]
fn flags_override_config_file() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    train(&cfg, "train-fc", &out, &["--optim.steps=1", "--seed", "9"]);
    let resolved = Config::parse(&fs::read_to_string(out.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!((resolved.optim.steps, resolved.seed, resolved.optim.batch), (1, 9, 2));
}

#[test]
fn joint_log_has_separate_terms_and_alpha_zero_matches_fc() {
    let (dir, cfg) = setup();
    let (fc, joint) = (dir.path().join("fc"), dir.path().join("joint"));
    train(&cfg, "train-fc", &fc, &[]);
    train(&cfg, "train-joint", &joint, &["--loss.alpha", "0"]);
    let log = fs::read_to_string(joint.join(LOG_FILE)).unwrap();
    let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"local") && header.contains(&"global"));

    let a = Checkpoint::load(fc.join(CHECKPOINT_FILE)).unwrap();
    let b = Checkpoint::load(joint.join(CHECKPOINT_FILE)).unwrap();
    let mut shared = 0;
    for e in a.entries.iter().filter(|e| e.name.contains(".weight.") || e.name.contains(".buffer.")) {
        let other = b.get(&e.name).unwrap_or_else(|| panic!("joint lacks {}", e.name));
        assert_eq!(e, other, "{}", e.name);
        shared += 1;
    }
    assert!(shared > 0 && b.entries.len() > a.entries.len());
}

#[test]
fn unknown_keys_and_bad_flags_are_config_errors() {
    let (dir, cfg) = setup();
    let out = dir.path().join("x");
    let e = sfc(&cfg, &["train-fc", "--out", path(&out), "--optim.stepz", "3"]).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Config);
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "[optim]\nlearning_rate = 1\n").unwrap();
    let e = sfc(&bad, &["train-fc", "--out", path(&out)]).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Config);
    let e = run(&args(&["no-such-command"])).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Config);
    assert!(!out.exists());
}

#[test]
fn grad_check_flag_and_command() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    sfc(&cfg, &["--grad-check", "train-joint", "--out", path(&out), "--optim.steps", "1"]).unwrap();
    sfc(&cfg, &["gradcheck", "--kind", "semantic", "--probes", "32"]).unwrap();
}

/// Synthesize a dataset, train briefly and propagate video 0.
fn pipeline(dir: &Path, cfg: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    sfc(cfg, &["synth", "--out", path(&data), "--data.sprites_min", "2"]).unwrap();
    let run_dir = dir.join("fc");
    train(cfg, "train-fc", &run_dir, &["--data", path(&data)]);
    let video = data.join("video00000");
    let pred = dir.join("pred");
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    sfc(cfg, &["propagate", "--fine", path(&ckpt), "--video", path(&video), "--out", path(&pred)]).unwrap();
    (video, pred, ckpt)
}

#[test]
fn propagate_eval_pipeline() {
    let (dir, cfg) = setup();
    let (video, pred, ckpt) = pipeline(dir.path(), &cfg);
    let first = LabelMap::load(label_path(&video.join("labels"), 0)).unwrap();
    let out = load_labels(&pred).unwrap();
    assert_eq!(out.len(), 4);
    assert_eq!(out[0].1, first, "frame 0 carries the given labels");
    assert!(out.iter().all(|(_, l)| (l.height, l.width) == (first.height, first.width)));
    assert!(pred.join(CONFIG_FILE).exists());

    let report = dir.path().join("eval/report.csv");
    sfc(&cfg, &["eval", "--pred", path(&pred), "--gt", path(&pred), "--report", path(&report)]).unwrap();
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "frame,j,f,jf");
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert_eq!(csv.lines().last().unwrap(), "mean,1.000000,1.000000,1.000000");
    assert!(dir.path().join("eval/report.csv.config.txt").exists());

    let fused = dir.path().join("fused");
    sfc(&cfg, &[
        "propagate", "--fine", path(&ckpt), "--semantic", path(&ckpt), "--video", path(&video),
        "--out", path(&fused), "--heatmap-cell", "1,2",
    ])
    .unwrap();
    assert_eq!(load_labels(&fused).unwrap().len(), 4);
    let heat = LabelMap::load(label_path(&fused.join("heatmaps"), 0)).unwrap();
    assert_eq!((heat.height, heat.width), (4, 4));
    assert_eq!(heat.get(1, 2), 255);
    let resolved = fs::read_to_string(fused.join(CONFIG_FILE)).unwrap();
    assert!(resolved.contains("top_k = 15"), "fused path uses its own top-k:\n{resolved}");

    let kp = dir.path().join("kp");
    sfc(&cfg, &[
        "propagate", "--fine", path(&ckpt), "--video", path(&video), "--keypoints",
        path(&video.join("keypoints.txt")), "--out", path(&kp),
    ])
    .unwrap();
    let pck = dir.path().join("pck.csv");
    let gt_kp = video.join("keypoints.txt");
    sfc(&cfg, &["eval", "--metric", "pck", "--pred", path(&kp), "--gt", path(&gt_kp), "--report", path(&pck)]).unwrap();
    let last = fs::read_to_string(&pck).unwrap().lines().last().unwrap().to_string();
    let vals: Vec<f64> = last.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(vals[0] <= vals[1] && vals[1] <= 1.0);
    sfc(&cfg, &["eval", "--metric", "pck", "--pred", path(&gt_kp), "--gt", path(&gt_kp), "--report", path(&pck)]).unwrap();
    let last = fs::read_to_string(&pck).unwrap().lines().last().unwrap().to_string();
    assert_eq!(last, "mean,1.000000,1.000000");
}

#[test]
fn eval_reports_gaps_and_empty_predictions() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    sfc(&cfg, &["synth", "--out", path(&data)]).unwrap();
    let gt = data.join("video00001/labels");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for (t, l) in load_labels(&gt).unwrap() {
        if t != 2 {
            LabelMap::new(l.height, l.width, vec![0; l.data.len()]).unwrap().save(label_path(&pred, t)).unwrap();
        }
    }
    let report = dir.path().join("r.csv");
    let e = sfc(&cfg, &["eval", "--pred", path(&pred), "--gt", path(&gt), "--report", path(&report)]).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Data);
    assert!(e.to_string().contains("00002"), "{e}");
    assert!(!report.exists());

    let l = &load_labels(&gt).unwrap()[2].1;
    LabelMap::new(l.height, l.width, vec![0; l.data.len()]).unwrap().save(label_path(&pred, 2)).unwrap();
    sfc(&cfg, &["eval", "--pred", path(&pred), "--gt", path(&gt), "--report", path(&report)]).unwrap();
    let last = fs::read_to_string(&report).unwrap().lines().last().unwrap().to_string();
    assert!(last.starts_with("mean,0.000000,"), "{last}");
}

#[test]
fn propagate_refuses_mismatched_architectures_and_bad_labels() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    sfc(&cfg, &["synth", "--out", path(&data)]).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, "train-fc", &a, &["--optim.steps", "0"]);
    train(&cfg, "train-semantic", &b, &["--optim.steps", "0", "--heads.out", "6"]);
    let video = data.join("video00000");
    let out = dir.path().join("out");
    let (fa, fb) = (a.join(CHECKPOINT_FILE), b.join(CHECKPOINT_FILE));
    let base = ["propagate", "--fine", path(&fa), "--semantic", path(&fb), "--video", path(&video), "--out", path(&out)];
    let e = sfc(&cfg, &base).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Config);
    assert!(!out.exists());
    let mut allowed = base.to_vec();
    allowed.push("--allow-mismatch");
    sfc(&cfg, &allowed).unwrap();

    let small = dir.path().join("small.pgm");
    LabelMap::new(8, 8, vec![1; 64]).unwrap().save(&small).unwrap();
    let out2 = dir.path().join("out2");
    let e = sfc(&cfg, &[
        "propagate", "--fine", path(&fa), "--video", path(&video), "--labels", path(&small), "--out", path(&out2),
    ])
    .unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Data);
    assert!(!out2.exists(), "no output before the grid check");
}

#[test]
fn dump_heatmap_writes_grid_sized_map() {
    let (dir, cfg) = setup();
    let run_dir = dir.path().join("run");
    train(&cfg, "train-fc", &run_dir, &["--optim.steps", "0"]);
    let img = dir.path().join("f.ppm");
    let data: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i * 37) % 255) as f32 / 255.0).collect();
    Image::new(3, 16, 16, data).unwrap().save(&img).unwrap();
    let out = dir.path().join("h/heat.pgm");
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    sfc(&cfg, &["dump-heatmap", "--ckpt", path(&ckpt), "--source", path(&img), "--cell", "0,3", "--out", path(&out)]).unwrap();
    let h = LabelMap::load(&out).unwrap();
    assert_eq!((h.height, h.width, h.get(0, 3)), (4, 4, 255));
}

#[test]
fn binary_exit_codes() {
    let (dir, cfg) = setup();
    let bin = env!("CARGO_BIN_EXE_sfc");
    let code = |a: &[&str]| Command::new(bin).args(a).output().unwrap().status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train-fc", "--out", "x", "--bogus.key", "1"]), 2);
    let junk = dir.path().join("junk.sfck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let video = dir.path().join("v");
    fs::create_dir_all(&video).unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        code(&["--config", path(&cfg), "propagate", "--fine", path(&junk), "--video", path(&video), "--out", path(&out)]),
        3
    );
    let good = dir.path().join("good");
    assert_eq!(code(&["--config", path(&cfg), "train-fc", "--out", path(&good), "--optim.steps", "0"]), 0);
    let mut bytes = fs::read(good.join(CHECKPOINT_FILE)).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&junk, &bytes).unwrap();
    assert_eq!(
        code(&["--config", path(&cfg), "propagate", "--fine", path(&junk), "--video", path(&video), "--out", path(&out)]),
        3
    );
    let nan = dir.path().join("nan");
    assert_eq!(
        code(&["--config", path(&cfg), "train-fc", "--out", path(&nan), "--optim.lr", "1e300", "--optim.steps", "3"]),
        4
    );
}
